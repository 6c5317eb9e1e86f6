"""Show that the verification checks notice a wrong formula.

Each fault removes the previous-step bias from one kernel. With the fault
active, the transition composition or the Bayes identity stops holding, and
the deviation is far above the check's tolerance.

    python demos/fault_injection.py
"""
import numpy as np

from ctxdiff import faults
from ctxdiff.adapter import LinearToyAdapter
from ctxdiff.forward import random_bayes_probes, verify_bayes_identity, verify_composition
from ctxdiff.schedule import make_schedule


def main():
    rng = np.random.default_rng(0)
    schedule = make_schedule("linear", 20, 0.00085, 0.012)
    adapter = LinearToyAdapter(2, 0.2)
    x0 = rng.standard_normal((8, 2)) + 1.0
    c = np.zeros(8, dtype=np.int64)
    t = rng.integers(2, schedule.T + 1, 8)
    x_prev, x_t = random_bayes_probes(x0, c, t, adapter, schedule, rng)

    def show(label):
        comp = verify_composition(x0, c, adapter, schedule)
        bayes = verify_bayes_identity(x0, c, t, adapter, schedule, x_prev, x_t)
        print(f"{label:28s} composition {comp.max_deviation:.2e}  bayes {bayes.max_deviation:.2e}")

    show("correct kernels")
    for fault in sorted(faults.KNOWN):
        with faults.inject(fault):
            show(fault)


if __name__ == "__main__":
    main()
