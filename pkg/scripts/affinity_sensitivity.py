"""Affinity vs. popularity, rating alignment and conformity as the generator's bias knobs are scaled."""

from dataclasses import replace

from _common import parser, setup

from bpl.data import GeneratorConfig
from bpl.evaluation import write_csv
from bpl.experiments import affinity_correlations


def main():
    p = parser(__doc__, seeds=1)
    p.add_argument("--scales", type=float, nargs="+", default=[0.0, 0.25, 0.5, 1.0, 1.5])
    args = p.parse_args()
    out = setup(args)
    base = GeneratorConfig()
    rows = []
    for scale in args.scales:
        for seed in range(args.seeds):
            cfg = replace(base, popularity_weight=scale * base.popularity_weight, rating_weight=scale * base.rating_weight,
                          conformity_noise=scale * base.conformity_noise, seed=seed)
            pop, align, conf = affinity_correlations(cfg)
            rows.append({"scale": scale, "seed": seed, "rho_popularity": pop, "rho_alignment": align,
                         "rho_conformity": conf})
            print(f"scale {scale:4.2f} seed {seed}: popularity {pop:+.3f} alignment {align:+.3f} "
                  f"conformity {conf:+.3f}", flush=True)
    write_csv(out / "affinity_sensitivity.csv", rows)


if __name__ == "__main__":
    main()
