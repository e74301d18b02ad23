"""Model and data replication on a skewed two-cluster SVM problem.

Four logical groups of two workers each. Compare epochs to 50% and 1% of
the optimal loss across replication choices; full replication processes
k times more rows per epoch than sharding.

Run: python demos/02_replication_tradeoffs.py
"""

from statengine import make_spec, plan, train
from statengine.datagen import two_cluster_skew
from statengine.reference import epochs_to_within, optimal_loss
from statengine.topology import MachineTopology

m = two_cluster_skew(1000, 40, seed=0)
topo = MachineTopology(4, 2)
spec = make_spec("svm", m.n_cols, step_size=0.01)
optimum = optimal_loss(spec, m)

for mr in ("permachine", "pernode", "percore"):
    for dr in ("sharding", "full"):
        r = train(plan(spec, m, topo, {"access": "row", "model_replication": mr, "data_replication": dr}), max_epochs=40)
        print(
            f"{mr:>10} {dr:>8}: epochs to 50% {epochs_to_within(r.trace, optimum, 0.5)}, "
            f"to 1% {epochs_to_within(r.trace, optimum, 0.01)}, rows/epoch {r.trace[1].processed}"
        )
