"""Smoke test for the phi4lab Python extension.

Build first:  cargo build --release -p phi4lab-python
Then run:     python3 python/smoke_test.py
"""

import importlib.util
import math
import pathlib
import random
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_extension():
    names = ["libphi4lab_py.so", "libphi4lab_py.dylib", "phi4lab_py.dll"]
    for profile in ["release", "debug"]:
        for name in names:
            lib = ROOT / "target" / profile / name
            if lib.exists():
                suffix = ".pyd" if name.endswith(".dll") else ".so"
                tmp = pathlib.Path(tempfile.mkdtemp()) / ("phi4lab_py" + suffix)
                shutil.copy(lib, tmp)
                spec = importlib.util.spec_from_file_location("phi4lab_py", tmp)
                mod = importlib.util.module_from_spec(spec)
                spec.loader.exec_module(mod)
                return mod
    sys.exit("extension not built: run `cargo build --release -p phi4lab-python`")


def close(a, b, tol):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    p4 = load_extension()
    failures = []

    def check(name, ok, detail=""):
        print(("PASS" if ok else "FAIL"), name, detail)
        if not ok:
            failures.append(name)

    grid = p4.Grid(2, 16)
    rng = random.Random(1)
    f = [rng.uniform(-1, 1) for _ in range(len(grid))]
    back = p4.dft_inverse(grid, p4.dft_forward(grid, f))
    err = max(abs(a - b) for a, b in zip(f, back))
    check("dft round trip", err < 1e-12, f"{err:.2e}")

    # One Fourier mode decays at rate 4 pi^2 |k|^2 under the pure heat flow.
    zero = p4.Coefficients.constant(0.0, 0.0, 1.0)
    wave = [math.cos(2 * math.pi * x) for x, _, _ in grid.points()]
    t = 0.01
    out = p4.heat_propagate(grid, wave, 0.0, t, zero)
    ratio = max(out) / max(wave)
    check("heat decay", close(ratio, math.exp(-4 * math.pi**2 * t), 1e-12), f"{ratio:.6f}")

    g = [rng.uniform(-1, 1) for _ in range(len(grid))]
    lt, res, gt = p4.bony(grid, f, g)
    total = [a + b + c for a, b, c in zip(lt, res, gt)]
    check("bony blocks are finite", all(math.isfinite(x) for x in total))
    check("besov norm positive", p4.besov_norm(grid, f, -0.5) > 0.0)

    coeffs = p4.Coefficients([0.0], [-1.0], 1.0)
    c4 = p4.renorm_c(coeffs, 3, 4, 1.0, 1.0)
    c8 = p4.renorm_c(coeffs, 3, 8, 1.0, 1.0)
    check("c_n grows with n", c8 > c4 > 0.0, f"c4={c4:.4f} c8={c8:.4f}")

    value, se, _ = p4.renorm_c_tilde(coeffs, 3, 2, 0.5, 1.0, 200, 3)
    exact = p4.renorm_c_tilde_expected(coeffs, 3, 2, 0.5)
    check("c_tilde within 4 SE of its expectation", abs(value - exact) <= 4 * se,
          f"mc={value:.5f}+-{se:.5f} exact={exact:.5f}")

    times, sups, _ = p4.solve_deterministic_gamma(grid, [0.0] * len(grid), [-1.0], 0.5, 50)
    check("zero initial data stays zero", max(sups) == 0.0 and len(times) == 51)

    # Rayleigh samples: P(R > h) = exp(-h^2 / 2) exactly.
    samples = [math.sqrt(-2.0 * math.log(1.0 - rng.random())) for _ in range(4000)]
    fit = p4.tail_fit(samples, [0.5, 1.0, 1.5, 2.0, 2.5])
    check("Rayleigh tail slope near 1/2", abs(fit["slope_h2"] - 0.5) < 0.1, f"{fit['slope_h2']:.3f}")

    sampled, exact_ratio, constant = p4.nelson(2, 4, 20000, 5)
    check("hypercontractive bound", sampled <= constant and exact_ratio <= constant)

    passed, checks = p4.verify()
    check("identity suite", passed, f"{len(checks)} checks")
    faulty, _ = p4.verify("widened-partition")
    check("fault is detected", not faulty)

    if failures:
        sys.exit(f"{len(failures)} smoke check(s) failed")
    print("all smoke checks passed")


if __name__ == "__main__":
    main()
