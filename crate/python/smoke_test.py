#!/usr/bin/env python3
"""Smoke test for the topkmon_py extension module.

Build the module first, then run this script from the repository root:

    cargo build -p topkmon-py --release
    python3 python/smoke_test.py
"""

import json
import math
import shutil
import sys
from pathlib import Path


def import_module():
    root = Path(__file__).resolve().parent.parent
    for profile in ("release", "debug"):
        built = root / "target" / profile / "libtopkmon_py.so"
        if built.exists():
            loadable = built.with_name("topkmon_py.so")
            if not loadable.exists() or built.stat().st_mtime > loadable.stat().st_mtime:
                shutil.copy2(built, loadable)
            sys.path.insert(0, str(loadable.parent))
            import topkmon_py

            return topkmon_py
    sys.exit("build the module first: cargo build -p topkmon-py --release")


tk = import_module()

CONFIG = {
    "n_sources": 3,
    "k_select": 1,
    "horizon": 12,
    "rate_budget": 0.2,
    "sources": [
        {"mu": 0.1, "lambda": 0.3},
        {"mu": 0.2, "lambda": 0.25},
        {"mu": 0.15, "lambda": 0.35},
    ],
}


def approx(a, b, tol=1e-12):
    assert abs(a - b) <= tol, f"{a} != {b} (tol {tol})"


def main():
    cfg = tk.Config(json.dumps(CONFIG))
    assert cfg.n_sources == 3 and cfg.k_select == 1 and cfg.horizon == 12
    assert "n_sources" in cfg.to_json()

    # Relevance weights: alpha_1 = 1, non-increasing, zero sentinel last.
    alpha = cfg.alpha()
    assert len(alpha) == 4
    approx(alpha[0], 1.0)
    assert all(a >= b - 1e-15 for a, b in zip(alpha, alpha[1:]))
    approx(alpha[3], 0.0)

    # Invalid configs are rejected with the offending field named.
    try:
        tk.Config(json.dumps({**CONFIG, "k_select": 9}))
    except ValueError as e:
        assert "k_select" in str(e)
    else:
        raise AssertionError("invalid config accepted")

    # Budget endpoints: full rate pins every switch time to the horizon,
    # zero budget pins them to zero.
    full = cfg.full_update_rate()
    solution, policy = tk.solve(cfg, full)
    assert solution["switch_times"] == [12, 12, 12]
    assert policy.kind == "three_stage"
    zero_solution, _ = tk.solve(cfg, 0.0)
    assert zero_solution["switch_times"] == [0, 0, 0]

    # The solved policy document round-trips through JSON.
    again = tk.Policy.from_json(policy.to_json())
    assert again.switch_times == policy.switch_times

    # Always-update keeps each mismatch probability at the per-source
    # always-update rate, and the analytic system rate is w (T-1)/T.
    curves = tk.propagate(cfg, tk.Policy.always())
    for n, src in enumerate(CONFIG["sources"]):
        w = 2 * src["mu"] * src["lambda"] / (src["mu"] + src["lambda"])
        for beta_t in curves["beta"][n]:
            approx(beta_t, w)
    approx(curves["update_rate"], full * 11 / 12)

    # The error approximation sandwiches the exact misselection probability.
    exact = tk.exact_joint(cfg, policy)
    for t, p_err in enumerate(exact["per_t_error"], start=1):
        betas = [curves_t[t - 1] for curves_t in tk.propagate(cfg, policy)["beta"]]
        bounds = tk.rho(cfg, betas)
        assert bounds["lower"] - 1e-9 <= p_err <= bounds["upper"] + 1e-9
        assert bounds["rho"] == min(bounds["rho_per_m"])

    # Monte Carlo agrees with the exact oracle and is seed-reproducible.
    mc = tk.monte_carlo(cfg, policy, 20000, 0x5EED)
    assert mc == tk.monte_carlo(cfg, policy, 20000, 0x5EED)
    for name in ("error_prob", "update_rate"):
        gap = abs(mc[name]["mean"] - exact[name])
        assert gap <= 4 * mc[name]["se"] + 1e-9, f"{name}: {gap} vs {mc[name]['se']}"

    # The analytic objective orders the policies sensibly.
    solved_obj = tk.approx_objective(cfg, policy)
    never_obj = tk.approx_objective(cfg, tk.Policy.never())
    assert solved_obj <= never_obj + 1e-12

    # Ranking error worked example: the top choice set is {2, 3, 5}; a
    # mismatch at position 5 misranks, one at position 6 does not.
    x = [0, 1, 1, 0, 1, 1]
    assert tk.top_k_error(x, [0, 1, 1, 0, 0, 1], 3)
    assert not tk.top_k_error(x, [0, 1, 1, 0, 1, 0], 3)
    assert not tk.top_k_error(x, x, 3)

    if not math.isfinite(solution["theta"]):
        raise AssertionError("theta must be finite")

    print("smoke test: OK")


if __name__ == "__main__":
    main()
