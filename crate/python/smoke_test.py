"""Smoke test for the meshsplat Python extension.

Builds the extension with cargo (unless MESHSPLAT_PY_LIB points at a built
library), imports it and runs a tiny generate / reconstruct / render loop.

    python3 python/smoke_test.py
"""

import importlib.util
import json
import os
import shutil
import subprocess
import sys
import sysconfig
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build_library() -> Path:
    lib = os.environ.get("MESHSPLAT_PY_LIB")
    if lib:
        return Path(lib)
    subprocess.run(
        ["cargo", "build", "--release", "-p", "meshsplat-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    return ROOT / "target" / "release" / "libmeshsplat_py.so"


def load(lib: Path, workdir: Path):
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    target = workdir / ("meshsplat_py" + suffix)
    shutil.copy(lib, target)
    spec = importlib.util.spec_from_file_location("meshsplat_py", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main() -> int:
    lib = build_library()
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        ms = load(lib, tmp)
        print("meshsplat_py", ms.__version__)

        frames = ms.generate_dataset("ellipsoid", str(tmp / "gen"), seed=1, n_views=6, resolution=32)
        assert frames == 6, frames

        gt_mesh = str(tmp / "gen" / "gt" / "mesh.ply")
        # independent samples of one surface differ by the sampling density
        self_cd = ms.chamfer_mm2(gt_mesh, gt_mesh, n_points=20000)
        assert 0.0 < self_cd < 1.0, self_cd

        h, w, pixels, psnr = ms.render_frame(str(tmp / "gen" / "gt" / "splats.ply"), str(tmp / "gen" / "dataset"), 0)
        assert (h, w, len(pixels)) == (32, 32, 32 * 32 * 3)
        assert psnr >= 50.0, psnr

        config = {"steps": 10, "gaussians_per_face": 2.0, "init_subdivisions": 1, "eval_every": 5}
        summary = json.loads(ms.reconstruct(str(tmp / "gen" / "dataset"), str(tmp / "rec"), json.dumps(config)))
        assert summary["best_loss"] <= summary["initial_loss"], summary
        cd = ms.chamfer_mm2(str(tmp / "rec" / "mesh.ply"), gt_mesh, n_points=20000)
        assert cd > self_cd
        print("reconstruction", summary, "cd_mm2", round(cd, 3))

        try:
            ms.reconstruct(str(tmp / "missing"), str(tmp / "x"))
        except ValueError as e:
            print("missing dataset rejected:", e)
        else:
            raise AssertionError("missing dataset accepted")

        try:
            ms.reconstruct(str(tmp / "gen" / "dataset"), str(tmp / "x"), '{"stepz": 1}')
        except ValueError:
            pass
        else:
            raise AssertionError("unknown config field accepted")
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
