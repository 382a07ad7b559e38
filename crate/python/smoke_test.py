"""Smoke test for the ghost_stereo_py extension.

Builds the extension with cargo (unless GHOST_STEREO_PY_LIB points at a
built library), loads it from a temporary directory and exercises the
exported types and ops against small NumPy references.
"""

import importlib.util
import json
import math
import os
import pathlib
import shutil
import subprocess
import sys
import tempfile

import numpy as np

ROOT = pathlib.Path(__file__).resolve().parent.parent


def built_library() -> pathlib.Path:
    explicit = os.environ.get("GHOST_STEREO_PY_LIB")
    if explicit:
        return pathlib.Path(explicit)
    subprocess.run(
        ["cargo", "build", "--release", "-p", "ghost-stereo-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = pathlib.Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target")) / "release"
    for name in ("libghost_stereo_py.so", "libghost_stereo_py.dylib", "ghost_stereo_py.dll"):
        if (target / name).exists():
            return target / name
    raise FileNotFoundError(f"no built extension in {target}")


def load(lib: pathlib.Path, into: pathlib.Path):
    suffix = ".pyd" if lib.suffix == ".dll" else ".so"
    dest = into / f"ghost_stereo_py{suffix}"
    shutil.copy(lib, dest)
    spec = importlib.util.spec_from_file_location("ghost_stereo_py", dest)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def gwc_reference(left, right, groups, levels):
    b, c, h, w = left.shape
    per = c // groups
    lg = left.reshape(b, groups, per, h, w)
    rg = right.reshape(b, groups, per, h, w)
    lg = lg / (np.linalg.norm(lg, axis=2, keepdims=True) + 1e-6)
    rg = rg / (np.linalg.norm(rg, axis=2, keepdims=True) + 1e-6)
    out = np.zeros((b, groups, levels, h, w))
    for d in range(levels):
        out[:, :, d, :, d:] = (lg[..., d:] * rg[..., : w - d]).sum(axis=2) * groups / c
    return out


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        gs = load(built_library(), pathlib.Path(tmp))

        cfg = gs.ModelConfig("desk")
        cfg.validate()
        again = gs.ModelConfig.from_json(cfg.to_json())
        assert json.loads(again.to_json()) == json.loads(cfg.to_json())
        assert cfg.max_disparity == 32 and cfg.use_cve and cfg.use_cva
        try:
            gs.ModelConfig.from_json('{"bogus": 1}')
        except ValueError:
            pass
        else:
            raise AssertionError("unknown keys must be rejected")

        (q, shape) = gs.topk_regression([1.0, 3.0, 2.0, 0.0], [1, 4, 1, 1], 2)
        assert shape == [1, 1, 1]
        assert abs(q[0] - 1.26894) < 1e-4, q

        rng = np.random.default_rng(0)
        left = rng.normal(size=(1, 8, 4, 6))
        right = rng.normal(size=(1, 8, 4, 6))
        vol, vshape = gs.gwc_volume(left.ravel().tolist(), right.ravel().tolist(), list(left.shape), 2, 3)
        got = np.array(vol).reshape(vshape)
        assert np.abs(got - gwc_reference(left, right, 2, 3)).max() < 1e-9

        report = json.loads(gs.analyze(cfg, 64, 64))
        assert report["model"]["total_params"] < report["vanilla_twin"]["total_params"]

        pair = gs.synthetic_pair(64, 64, 3)
        model = gs.GhostStereo(cfg)
        assert model.num_parameters() == report["model"]["total_params"]
        disp, dshape = model.predict(pair["left"], pair["right"], 64, 64)
        assert dshape == [64, 64] and all(math.isfinite(v) for v in disp)
        disp2, _ = model.predict(pair["left"], pair["right"], 64, 64)
        assert disp == disp2

        gt = pair["disparity"]
        zero = gs.evaluate(gt, gt, pair["mask"])
        assert zero["epe"] == 0.0 and zero["d1_all"] == 0.0 and zero["bad3"] == 0.0
    print("python smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
