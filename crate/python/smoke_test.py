"""Smoke test for the pyfbmheat extension.

Run after `maturin develop -m crates/python/Cargo.toml`, or directly: if the
module is not importable the script builds it with cargo and loads the
shared library from target/release.
"""

import math
import os
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        import pyfbmheat

        return pyfbmheat
    except ImportError:
        pass
    subprocess.run(["cargo", "build", "--release", "-p", "fbmheat-py"], cwd=ROOT, check=True)
    lib = ROOT / "target" / "release" / ("pyfbmheat.dll" if os.name == "nt" else "libpyfbmheat.so")
    if not lib.exists():
        lib = lib.with_suffix(".dylib")
    tmp = tempfile.mkdtemp()
    shutil.copy(lib, os.path.join(tmp, "pyfbmheat.pyd" if os.name == "nt" else "pyfbmheat.so"))
    sys.path.insert(0, tmp)
    import pyfbmheat

    return pyfbmheat


def main():
    m = load()
    h = 0.7

    assert abs(m.covariance(1.0, 1.0, h) - 1.0) < 1e-12
    assert abs(m.covariance(0.5, 0.25, h) - 0.5 * (0.5 ** 1.4 + 0.25 ** 1.4 - 0.25 ** 1.4)) < 1e-12
    try:
        m.covariance(1.0, 1.0, 0.4)
        raise AssertionError("H = 0.4 accepted")
    except ValueError:
        pass

    paths = m.FbmPaths.sample(64, 2000, dim=1, hurst=h, seed=7)
    assert paths.n_paths == 2000 and paths.dim == 1
    assert len(paths.times) == 65
    var = sum(e[0] ** 2 for e in paths.endpoints()) / paths.n_paths
    assert abs(var - 1.0) < 0.1, var
    check = paths.covariance_check()
    assert check["max_abs_z"] < 5.0, check

    with tempfile.TemporaryDirectory() as d:
        f = os.path.join(d, "p.fbm1")
        paths.write_fbm1(f)
        back = m.FbmPaths.read_fbm1(f)
        assert back.path(3) == paths.path(3)

    flat = m.Fields.orthonormal(2)
    assert abs(flat.distance([0.0, 0.0], [0.3, 0.4]) - 0.5) < 1e-9
    assert abs(flat.a0_closed_form([0.0, 0.0]) - 1.0 / (2.0 * math.pi)) < 1e-12

    r = m.rate_min(flat, [0.0, 0.0], [0.3, 0.4], n_steps=32, hurst=h)
    assert r["converged"], r

    so3 = m.Fields.so3_frame()
    br = so3.bracket(0, 1, [0.1, 0.2, 0.3])
    assert len(br) == 3

    est = m.mc_density(flat, [0.0, 0.0], 1.0, 4000, [[0.0, 0.0]], hurst=h, seed=3)
    p = est["p_hat"][0]
    assert abs(p - 1.0 / (2.0 * math.pi)) < 5 * est["stderr"][0] + est["bias_bound"][0] + 1e-3, est

    zero, _ = m.qh_estimate(2000, omega="zero", hurst=h, seed=1)
    assert zero == 0.0
    q, se = m.qh_estimate(4000, hurst=h, seed=1)
    assert math.isfinite(q) and se >= 0.0

    lam = paths.lambda_coefficient("1", 1.0)
    assert len(lam) == paths.n_paths

    print("pyfbmheat smoke test passed")


if __name__ == "__main__":
    main()
