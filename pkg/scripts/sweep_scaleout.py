#!/usr/bin/env python3
"""Cost-model scale-out sweep: end-to-end throughput vs device count.

One CSV row per (devices, precision); the th_all column should grow
nearly linearly with the device count while the per-engine bound stays
memory-limited.
"""

import sys

from switchsgd.costmodel import CostParams, th_all, th_comp, th_engine

FEATURES = 10**6
MINIBATCH = 16


def main():
    print("n_fpgas,precision,th_comp_gbps,th_engine_gbps,th_all_gbps,linearity")
    for s in (1, 2, 4, 8):
        base = None
        for f in (1, 2, 3, 4, 6, 8):
            p = CostParams(
                n_fpgas=f,
                n_engines=1,
                n_features=FEATURES,
                minibatch=MINIBATCH,
                precision=s,
            )
            total = th_all(p)
            if base is None:
                base = total
            print(
                f"{f},{s},{th_comp(p):.3f},{th_engine(p):.3f},{total:.3f},"
                f"{total / (base * f):.4f}"
            )
    return 0


if __name__ == "__main__":
    sys.exit(main())
