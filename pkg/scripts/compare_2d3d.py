#!/usr/bin/env python3
"""Mean Dice of the axial 2-D net, the standard 3-D net and 2D-3D variant A, per seed."""

from _common import Timer, header, parser, row, setup, split

from cascadeseg import trainer


def main():
    args = parser(__doc__).parse_args()
    cfg = setup(args)
    wins = []
    for seed in args.seeds:
        train, test = split(args, seed)
        with Timer() as t:
            scores = trainer.compare_2d3d(train, test, cfg, seed)["scores"]
        print(f"\nseed {seed} ({t.seconds / 60:.1f} min)")
        print(header("model"))
        for name, s in scores.items():
            print(row(name, s))
        wins.append(sum(scores["2d3d_a"][r] > scores["3d_standard"][r] for r in ("WT", "TC", "EC")))
    print("\nregions where 2d3d_a beats 3d_standard, per seed:", wins)


if __name__ == "__main__":
    main()
