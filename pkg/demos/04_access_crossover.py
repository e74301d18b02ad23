"""Row vs column epoch time as the matrix gets sparser.

Run: python demos/04_access_crossover.py
"""

from statengine import make_spec
from statengine.cli import sweep_crossover
from statengine.datagen import gaussian

m = gaussian(2000, 100, 0.5, seed=0)
spec = make_spec("svm", m.n_cols, 0.01, regularization=0.01)
print(f"{'keep':>6} {'cost ratio':>11} {'row ms':>8} {'col ms':>8}")
for r in sweep_crossover(m, spec, (0.01, 0.05, 0.2, 1.0), repeats=3):
    print(f"{r['keep_fraction']:>6} {r['cost_ratio']:>11.3g} {r['row_epoch_ms']:>8.2f} {r['col_epoch_ms']:>8.2f}")
