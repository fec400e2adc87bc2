"""Finite-difference check of every parameter gradient of the toy network."""

import argparse
import time

from harmonium import gift


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=8)
    ap.add_argument("--h", type=float, default=1e-4)
    ap.add_argument("--tol", type=float, default=1e-4)
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--top", type=int, default=10, help="print the N worst parameter tensors")
    args = ap.parse_args()

    cfg = gift.GiftConfig()
    data = gift.synthetic_pairs(1, args.size, args.seed)
    net = gift.GiftNetwork(cfg)
    recon = gift.GiftNetwork(gift.reconstruction_config(cfg))
    t0 = time.perf_counter()
    report, _, _ = gift.check_gradients(net, data.composites, data.masks, data.reals,
                                        recon.relations(data.reals, data.masks), h=args.h)
    elapsed = time.perf_counter() - t0
    for name, err in sorted(report.per_parameter.items(), key=lambda kv: -kv[1])[:args.top]:
        print(f"{name:28s} {err:.2e}")
    print(f"{report.n_checked} scalars, max relative error {report.max_error:.2e} ({report.worst}), {elapsed:.1f}s")
    return 0 if report.passed(args.tol) else 1


if __name__ == "__main__":
    raise SystemExit(main())
