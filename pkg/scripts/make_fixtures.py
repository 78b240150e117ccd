"""Regenerate the packaged 30-bus wind fixture, its forecast-error data and ambiguity set.

    python scripts/make_fixtures.py

Outputs go to src/gmm_drcvar/data/. Everything is seeded, so a rerun
reproduces the committed files.
"""

import json
import time
from pathlib import Path

from gmm_drcvar.ambiguity import build_ambiguity_set, save_ambiguity
from gmm_drcvar.case_model import WindFarm, parse_matpower, scale_flow_limits, serialize_case, with_wind
from gmm_drcvar.gmm import fit_best_of, save_params, write_samples_csv
from gmm_drcvar.oracle import generate_from_spec

DATA = Path(__file__).resolve().parents[1] / "src" / "gmm_drcvar" / "data"

FLOW_SCALE = 0.8
RESERVE_FRACTION = 0.5
RESERVE_PRICE = 0.5
FARMS = [(7, 25.0), (15, 20.0), (27, 15.0)]
N_OBS = 1000
M = 3
N_BOOT = 2000
SEED_DATA, SEED_FIT, SEED_BOOT = 11, 5, 3


def main():
    base = parse_matpower((DATA / "case30.m").read_text(), r_max_fraction=RESERVE_FRACTION,
                          c_up=RESERVE_PRICE, c_dn=RESERVE_PRICE, name="case30_wind")
    case = scale_flow_limits(base, FLOW_SCALE)
    case = with_wind(case, [WindFarm(b, f, f"w{i + 1}") for i, (b, f) in enumerate(FARMS)],
                     source="case30.m with three added wind farms",
                     flow_limits=f"post-reduction: rateA x {FLOW_SCALE}",
                     reserves=f"r_max = {RESERVE_FRACTION} (p_max - p_min), price {RESERVE_PRICE} $/MW")
    (DATA / "case30_wind.json").write_text(serialize_case(case))

    data = generate_from_spec(DATA / "wind3.toml", N_OBS, SEED_DATA)
    write_samples_csv(DATA / "wind3_errors.csv", data.values, data.ids)

    fit = fit_best_of(data.values, M, seed=SEED_FIT)
    save_params(DATA / "wind3_gmm.json", fit.params)
    t = time.perf_counter()
    amb, _ = build_ambiguity_set(data.values, delta=0.95, n_resamples=N_BOOT, seed=SEED_BOOT, base=fit)
    save_ambiguity(DATA / "wind3_ambiguity.json", amb)
    print(f"bootstrap of {N_BOOT} resamples took {time.perf_counter() - t:.1f} s")
    print(json.dumps({"bic": fit.bic, "loglik": fit.log_likelihood, "weights": fit.params.weights.tolist()}))


if __name__ == "__main__":
    main()
