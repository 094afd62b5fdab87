"""Smoke test for the `facesolve` extension module.

Uses an installed module when one is importable (e.g. after
`maturin develop -m crates/py/Cargo.toml`); otherwise builds the extension
with cargo and loads it from a temporary directory.
"""

import json
import math
import os
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    try:
        import facesolve

        return facesolve
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "facesolve-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = pathlib.Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target"))
    lib = target / "release" / ("facesolve.dll" if sys.platform == "win32" else
                               "libfacesolve.dylib" if sys.platform == "darwin" else "libfacesolve.so")
    tmp = pathlib.Path(tempfile.mkdtemp())
    shutil.copy(lib, tmp / ("facesolve.pyd" if sys.platform == "win32" else "facesolve.so"))
    sys.path.insert(0, str(tmp))
    import facesolve

    return facesolve


def main():
    fs = load_module()

    rig = fs.Rig.demo()
    assert (rig.n_markers, rig.n_channels) == (40, 24), rig
    assert fs.Rig.from_json(rig.to_json()).channel_names == rig.channel_names

    # the neutral pose evaluates to the neutral markers and the linear match
    # recovers zero weights
    neutral = rig.evaluate([0.0] * rig.n_channels)
    assert len(neutral) == 3 * rig.n_markers
    w, objective = fs.match_frame(rig, neutral)
    assert max(w) < 1e-6 and objective < 1e-12, (w, objective)

    clip = fs.rom_clip(rig, 40, seed=3)
    track = fs.bake(rig, clip)
    assert len(track) == 40 and track.frame(0) == rig.evaluate(clip.frames[0])
    assert json.loads(track.to_json())["n"] == rig.n_markers

    kept = fs.salient_indices(track, 0.3)
    assert kept[0] == 0 and kept == sorted(kept)

    try:
        fs.WeightTrack(["a", "b"], [[0.5]])
    except ValueError as e:
        assert "/frames/0" in str(e), e
    else:
        raise AssertionError("short frame accepted")

    data = fs.make_training_set(rig, facs_frames_per_channel=2, rom_frames=150, seed=5)
    assert len(data) == 2 * rig.n_channels + 150
    bundle = fs.train(rig, data, epochs=2)
    assert len(bundle.regions) == 7

    report = fs.solve(rig, bundle, track, anchors=[(5, clip.frames[5])])
    assert len(report.raw) == 40 and report.rmse_aligned is not None
    raw_rmse = fs.rmse_curve(rig, report.raw, track)
    assert all(math.isclose(a, b) for a, b in zip(raw_rmse, report.rmse_raw))

    names = ["jawOpen", "lipPuckererL"]
    tuned, stats = fs.finetune(rig, report.aligned, report.raw, names, frames=(0, 9), max_iters=30)
    assert len(stats) == 10 and all(f <= i for i, f in stats), stats
    frozen = [k for k, c in enumerate(rig.channel_names) if c not in names]
    for f in range(40):
        for k in frozen if f < 10 else range(rig.n_channels):
            assert tuned.frames[f][k] == report.raw.frames[f][k]

    print("python smoke test passed")


if __name__ == "__main__":
    main()
