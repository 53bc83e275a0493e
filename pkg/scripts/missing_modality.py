#!/usr/bin/env python3
"""2-D model 1 trained on the full-modality fifth of the data, with and without
subnetworks pretrained on every patient that has the matching modality."""

from _common import Timer, header, parser, row, setup, split

from cascadeseg import trainer


def main():
    ap = parser(__doc__)
    ap.add_argument("--orientation", default="axial")
    args = ap.parse_args()
    cfg = setup(args)
    for seed in args.seeds:
        train, test = split(args, seed)
        with Timer() as t:
            r = trainer.missing_modality_experiment(train, test, cfg, seed, args.orientation)
        print(f"\nseed {seed}: {r['n_full']} of {r['n_train']} training patients have every modality "
              f"({t.seconds / 60:.1f} min)")
        print(header("model"))
        print(row("baseline", r["baseline"]))
        print(row("pretrained", r["pretrained"]))


if __name__ == "__main__":
    main()
