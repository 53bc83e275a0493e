#!/usr/bin/env python3
"""Six 2D-3D members (variants A/B/C x 2-D models 1/2) merged by the hierarchical vote."""

from _common import Timer, header, parser, row, setup, split

from cascadeseg import trainer
from cascadeseg.metrics import evaluate, mean_scores
from cascadeseg.vote import Thresholds, merge_segmentations


def main():
    ap = parser(__doc__)
    ap.set_defaults(seeds=[0])
    ap.add_argument("--sweep", type=float, nargs="*", default=[],
                    help="extra tumour thresholds to report (core and enhancing held at config values)")
    args = ap.parse_args()
    cfg = setup(args)
    for seed in args.seeds:
        train, test = split(args, seed)
        with Timer() as t:
            res = trainer.run_ensemble_protocol(train, test, cfg, seed)
        print(f"\nseed {seed} ({t.seconds / 60:.1f} min)")
        print(header("member"))
        for name, s in res.member_scores.items():
            print(row(name, s))
        print(row("merged", res.merged_scores))
        e = cfg.ensemble
        for tt in args.sweep:
            th = Thresholds(tt, e.t_core, e.t_enhancing, e.inclusive)
            merged = [merge_segmentations([m[v.patient_id] for m in res.members.values()], th) for v in test]
            print(row(f"merged T_tumor={tt:g}", mean_scores([evaluate(m, v.labels) for m, v in zip(merged, test)])))


if __name__ == "__main__":
    main()
