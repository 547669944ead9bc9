"""Smoke test for the mixfrac_py extension.

Build and install it first:

    pip install --no-build-isolation ./crates/python
"""

import math
import sys
import tempfile

import mixfrac_py as mf


def close(a, b, tol):
    return abs(a - b) <= tol


def main():
    h = 0.75
    for t, s in [(1.0, 0.5), (0.3, 0.7), (0.2, 0.2)]:
        want = 0.5 * (t ** (2 * h) + s ** (2 * h) - abs(t - s) ** (2 * h))
        assert close(mf.fbm_covariance(t, s, h), want, 1e-12), (t, s)
    assert mf.kernel_z(0.5, 0.25, h) > 0.0

    try:
        mf.fbm_covariance(1.0, 0.5, 0.4)
    except ValueError:
        pass
    else:
        raise AssertionError("H < 1/2 must be rejected")

    paths = mf.generate_paths(h, 1.0, 32, 400, seed=3)
    assert len(paths["t"]) == 33
    assert len(paths["brownian"]) == 400 and len(paths["fractional"]) == 400
    assert all(p[0] == 0.0 for p in paths["fractional"])
    var = sum(p[-1] ** 2 for p in paths["fractional"]) / 400
    assert 0.7 < var < 1.3, var
    again = mf.generate_paths(h, 1.0, 32, 400, seed=3)
    assert again["fractional"] == paths["fractional"]

    ones = [1.0] * 65
    assert mf.phi_norm_sq(ones, 1.0, h) > 0.0
    assert len(mf.gamma_star(ones, 1.0, h)) == 65

    ric = mf.riccati(n_steps=64)
    assert math.isfinite(ric["cost"]) and ric["cost"] > 0.0

    config = """
name = "smoke"
n_steps = 64
n_paths = 4000
seed = 5

[lq]
n = 0.0

[mc]
tol = 1e-4
"""
    sol = mf.solve_lq(config)
    assert sol["converged"], sol["log"][-1]
    gap = abs(sol["cost"] - ric["cost"])
    assert gap <= 4 * sol["cost_stderr"] + 0.02 * ric["cost"], (sol["cost"], ric["cost"])

    assert mf.run_cli(["--help"]) == 0
    with tempfile.TemporaryDirectory() as tmp:
        cfg = f"{tmp}/paths.toml"
        with open(cfg, "w") as f:
            f.write('name = "smoke-paths"\nn_steps = 16\nn_paths = 50\nseed = 1\n')
        assert mf.run_cli(["paths", "--config", cfg, "--out", f"{tmp}/out"]) == 0

    print(f"smoke test passed: J = {sol['cost']:.4f} ± {sol['cost_stderr']:.1e}, Riccati {ric['cost']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
