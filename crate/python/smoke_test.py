"""Smoke test for the uwsplat extension module.

Build first:  cargo build --release -p uwsplat-py
Then run:     python3 python/smoke_test.py [path/to/libuwsplat_py.so]
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load(path=None):
    if path is None:
        for profile in ("release", "debug"):
            p = ROOT / "target" / profile / "libuwsplat_py.so"
            if p.exists():
                path = p
                break
        else:
            sys.exit("libuwsplat_py.so not found; run `cargo build --release -p uwsplat-py`")
    loader = importlib.machinery.ExtensionFileLoader("uwsplat", str(path))
    spec = importlib.util.spec_from_file_location("uwsplat", str(path), loader=loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    return module


def main():
    uw = load(sys.argv[1] if len(sys.argv) > 1 else None)

    scene = uw.synth_scene("turbid", seed=3, n_gaussians=60, width=24, height=20, n_views=3)
    assert (scene.width, scene.height, scene.n_views) == (24, 20, 3), scene
    clean, depth = scene.clean(0), scene.depth(0)
    assert len(clean) == 20 and len(clean[0]) == 24 and len(clean[0][0]) == 3

    again = uw.degrade(clean, depth, scene.beta, scene.b, scene.b_inf)
    assert uw.psnr(again, scene.degraded(0)) >= 99.0
    assert abs(uw.ssim(clean, clean) - 1.0) < 1e-9

    phys = uw.recover(scene, views=[0, 1], iterations=300)
    for got, want in zip(phys.beta, scene.beta):
        assert abs(got - want) / want < 0.1, (phys, scene.beta)
    restored, mask = uw.restore(scene.degraded(2), scene.depth(2), phys)
    assert len(mask) == 20 and len(mask[0]) == 24
    assert uw.psnr(restored, scene.clean(2)) > 30.0

    name, probs, w = uw.classify(scene.degraded(0))
    assert name in ("clear", "medium", "turbid")
    assert abs(sum(probs) - 1.0) < 1e-12 and 0.0 <= w <= 1.0

    cases = uw.gradcheck(seeds=[2])
    assert len(cases) == 10 and all(err < 1e-4 for _, err, _ in cases), cases

    model = uw.train_model(scene, iterations=40, n_gaussians=40, eval_interval=20)
    assert model.diverged is None and model.iteration == 40
    assert [row["iter"] for row in model.log][-1] == 40
    assert math.isfinite(model.log[-1]["psnr"])
    fields = model.render(scene, 1)
    assert set(fields) >= {"j_hat", "attenuation", "backscatter", "depth", "alpha"}
    out = model.restore(scene.degraded(1), scene.depth(1))
    assert len(out) == 20

    with tempfile.TemporaryDirectory() as tmp:
        path = pathlib.Path(tmp) / "model.dpgs"
        model.save(str(path))
        loaded = uw.load_model(str(path))
        assert loaded.iteration == model.iteration and loaded.beta == model.beta
        scene.save(str(pathlib.Path(tmp) / "bundle"))
        assert uw.load_scene(str(pathlib.Path(tmp) / "bundle")).n_views == 3

    try:
        uw.synth_scene("murky")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown class accepted")

    print("smoke test passed:", scene, phys, model)


if __name__ == "__main__":
    main()
