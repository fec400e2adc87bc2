"""Plan (without rendering) a catalog of 350 images whose 308/118 train/test
foregrounds are sampled against 10 references each, and print the pair counts."""

import argparse
from pathlib import Path

from harmonium import color, dataset


def plan_counts(refs: int = 10, seed: int = 0) -> tuple[int, int]:
    std = color.standard_patch_colors()

    def images(prefix, n_images, n_fg):
        return [dataset.AnnotatedImage(f"{prefix}{i:03d}", Path(f"{prefix}{i:03d}.png"),
                                       (Path("m0.png"),) * (2 if i < n_fg - n_images else 1), std)
                for i in range(n_images)]

    train, test = images("train", 250, 308), images("test", 100, 118)
    plan = dataset.plan_entries(train + test, refs, seed, dataset.SplitSpec(test_ids=tuple(a.id for a in test)))
    return sum(p.split == "train" for p in plan), sum(p.split == "test" for p in plan)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--refs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    n_train, n_test = plan_counts(args.refs, args.seed)
    print(f"train pairs: {n_train}")
    print(f"test pairs:  {n_test}")
    return 0 if args.refs != 10 or (n_train, n_test) == (3080, 1180) else 1


if __name__ == "__main__":
    raise SystemExit(main())
