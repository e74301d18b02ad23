"""Train least squares with the planner's choices, then force the other access method.

Run: python demos/01_train_least_squares.py
"""

from statengine import make_spec, plan, train
from statengine.datagen import gaussian
from statengine.reference import epochs_to_within, optimal_loss

m = gaussian(2000, 50, 0.2, seed=0)
spec = make_spec("ls", m.n_cols, step_size=0.01)
optimum = optimal_loss(spec, m)

p = plan(spec, m)
print("planner chose:", p.access.value, p.model_replication.value, p.data_replication.value)
print(f"optimal loss {optimum:.4f}")

for access in ("row", "col"):
    r = train(plan(spec, m, overrides={"access": access}), max_epochs=30)
    print(f"{access:>4}: final loss {r.final_loss:.4f}, epochs to 1% = {epochs_to_within(r.trace, optimum, 0.01)}")
