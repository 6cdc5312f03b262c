"""The coupling curve q(s) of the shipped M=2 instance: concavity and its slope at zero."""
import argparse

import numpy as np

from ulab.harness import coupling_instance


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--name", default="coupling-m2")
    args = ap.parse_args()
    qc = coupling_instance(args.name).run()
    d2, se = qc.second_differences()
    print(f"{'s':>6} {'q(s)':>10} {'se':>9}")
    for s, q, e in zip(qc.s, qc.q, qc.se):
        print(f"{s:>6.2f} {q:>10.5f} {e:>9.5f}")
    print("second differences:", np.array2string(d2, precision=6))
    slope, sse = qc.slope_at_zero()
    direct, dse = qc.direct()
    print(f"central difference at 0: {slope:.5f} +- {sse:.5f}")
    print(f"direct E<h>:             {direct:.5f} +- {dse:.5f}")


if __name__ == "__main__":
    main()
