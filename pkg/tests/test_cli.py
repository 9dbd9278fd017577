import json
import os

import numpy as np
import pytest
from PIL import Image

from noise2fast import cli, imaging
from noise2fast.imaging import ImageData, from_plane, save_image


def write_png(path, shape=(10, 10), seed=0):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, shape).astype(np.uint8)
    Image.fromarray(arr).save(path)
    return arr


def write_float_stack(path, slices=2, shape=(8, 8), seed=0):
    rng = np.random.default_rng(seed)
    stack = rng.uniform(0, 255, (slices, *shape, 1)).astype(np.float32)
    save_image(ImageData(stack, "float32", 255.0), path)
    return stack


def fast_args(extra):
    return [*extra, "--max-epochs", "2", "--patience", "100"]


# ---------------------------------------------------------------------------
# denoise
# ---------------------------------------------------------------------------


def test_denoise_single_png(tmp_path):
    src = tmp_path / "img.png"
    write_png(src)
    out = tmp_path / "out.png"
    code = cli.main(fast_args(["denoise", "--input", str(src), "--output", str(out), "--seed", "7"]))
    assert code == 0
    assert out.exists()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 7
    assert manifest["files"][0]["status"] == "ok"
    assert manifest["aggregate"]["files_ok"] == 1


def test_denoise_directory_of_stacks(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    for i in range(3):
        write_float_stack(src / f"s{i}.tiff", seed=i)
    out = tmp_path / "out"
    code = cli.main(fast_args(["denoise", "--input", str(src), "--output", str(out), "--seed", "1"]))
    assert code == 0
    outputs = sorted(p.name for p in out.iterdir() if p.suffix == ".tiff")
    assert outputs == ["s0.tiff", "s1.tiff", "s2.tiff"]
    manifest = json.loads((out / "manifest.json").read_text())
    # two slices denoised per stack
    assert all(len(rec["epochs"]) == 2 for rec in manifest["files"])


def test_denoise_byte_identical_reruns(tmp_path):
    src = tmp_path / "img.png"
    write_png(src, seed=3)
    out_a = tmp_path / "a" / "img.png"
    out_b = tmp_path / "b" / "img.png"
    args = lambda out: fast_args(
        ["denoise", "--input", str(src), "--output", str(out), "--seed", "42"]
    )
    assert cli.main(args(out_a)) == 0
    assert cli.main(args(out_b)) == 0
    assert out_a.read_bytes() == out_b.read_bytes()
    man_a = (tmp_path / "a" / "manifest.json").read_text()
    man_b = (tmp_path / "b" / "manifest.json").read_text()
    # manifests differ only in the output paths they mention
    assert man_a.replace(str(tmp_path / "a"), "") == man_b.replace(str(tmp_path / "b"), "")


def test_denoise_partial_failure_exit_code(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    write_png(src / "good.png")
    (src / "bad.png").write_bytes(b"not a png at all")
    out = tmp_path / "out"
    code = cli.main(fast_args(["denoise", "--input", str(src), "--output", str(out)]))
    assert code == 1
    manifest = json.loads((out / "manifest.json").read_text())
    statuses = {r["input"].split("/")[-1]: r["status"] for r in manifest["files"]}
    assert statuses == {"good.png": "ok", "bad.png": "error"}
    agg = manifest["aggregate"]
    assert agg["files_ok"] + agg["files_skipped"] + agg["files_error"] == len(manifest["files"])


def test_denoise_telemetry_file(tmp_path):
    src = tmp_path / "img.png"
    write_png(src)
    telem = tmp_path / "telemetry.jsonl"
    code = cli.main(
        fast_args(
            ["denoise", "--input", str(src), "--output", str(tmp_path / "o.png"),
             "--telemetry", str(telem)]
        )
    )
    assert code == 0
    lines = [json.loads(l) for l in telem.read_text().splitlines()]
    assert len(lines) == 2  # two epochs
    assert {"epoch", "train_loss_per_pair", "val_mse"} <= set(lines[0])


def test_seed_env_fallback(tmp_path, monkeypatch):
    src = tmp_path / "img.png"
    write_png(src)
    monkeypatch.setenv("N2F_SEED", "123")
    out = tmp_path / "o.png"
    assert cli.main(fast_args(["denoise", "--input", str(src), "--output", str(out)])) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 123


def test_exact_without_clean_exits_2(tmp_path):
    src = tmp_path / "img.png"
    write_png(src)
    code = cli.main(
        fast_args(
            ["denoise", "--input", str(src), "--output", str(tmp_path / "o.png"),
             "--scheme", "exact"]
        )
    )
    assert code == 2
    assert not (tmp_path / "o.png").exists()  # fails before touching files


def test_missing_input_exits_2(tmp_path):
    code = cli.main(
        fast_args(["denoise", "--input", str(tmp_path / "nope"), "--output", str(tmp_path / "o")])
    )
    assert code == 2


def test_bad_flag_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["denoise", "--input", "x", "--loss", "huber"])
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# add-noise
# ---------------------------------------------------------------------------


def test_add_noise_folder(tmp_path):
    src = tmp_path / "clean"
    src.mkdir()
    for i in range(3):
        write_png(src / f"c{i}.png", seed=i)
    out = tmp_path / "noisy"
    code = cli.main(["add-noise", "--input", str(src), "--output", str(out), "--sigma", "25", "--seed", "3"])
    assert code == 0
    files = sorted(p.name for p in out.iterdir() if p.suffix == ".tiff")
    assert files == ["c0.tiff", "c1.tiff", "c2.tiff"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert all("seed" in rec for rec in manifest["files"])
    assert manifest["aggregate"]["sigma"] == 25.0


def test_add_noise_sigma_zero_preserves_values(tmp_path):
    src = tmp_path / "c.png"
    arr = write_png(src, seed=9)
    out = tmp_path / "noisy"
    assert cli.main(["add-noise", "--input", str(src), "--output", str(out), "--sigma", "0"]) == 0
    noisy = imaging.load_image(out / "c.tiff")
    assert np.array_equal(noisy.plane(), arr.astype(np.float32))


def test_add_noise_reproducible_bytes(tmp_path):
    src = tmp_path / "c.png"
    write_png(src, seed=1)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        assert cli.main(["add-noise", "--input", str(src), "--output", str(out), "--sigma", "10", "--seed", "5"]) == 0
    assert (out_a / "c.tiff").read_bytes() == (out_b / "c.tiff").read_bytes()


def test_add_noise_requires_sigma(tmp_path):
    src = tmp_path / "c.png"
    write_png(src)
    assert cli.main(["add-noise", "--input", str(src), "--output", str(tmp_path / "o")]) == 2


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


def test_benchmark_on_the_fly_noise(tmp_path):
    src = tmp_path / "clean"
    src.mkdir()
    for i in range(2):
        write_png(src / f"c{i}.png", shape=(16, 16), seed=i)
    report = tmp_path / "rep" / "report.csv"
    code = cli.main(
        fast_args(
            ["benchmark", "--input", str(src), "--sigma", "25", "--report", str(report), "--seed", "2"]
        )
    )
    assert code == 0
    lines = report.read_text().splitlines()
    assert lines[0] == "image,psnr_noisy,psnr_denoised,ssim_noisy,ssim_denoised,epochs,seconds"
    assert len(lines) == 4  # header + 2 rows + mean
    assert lines[-1].startswith("mean,")
    rows = [l.split(",") for l in lines[1:3]]
    mean_from_rows = sum(float(r[2]) for r in rows) / 2
    assert abs(float(lines[-1].split(",")[2]) - mean_from_rows) < 1e-9
    assert (tmp_path / "rep" / "report_psnr.png").exists()
    assert (tmp_path / "rep" / "report_val.png").exists()
    manifest = json.loads((tmp_path / "rep" / "report_manifest.json").read_text())
    assert manifest["aggregate"]["files_ok"] == 2


def test_benchmark_paired_dirs_with_unpaired_skip(tmp_path):
    clean = tmp_path / "clean"
    noisy = tmp_path / "noisy"
    clean.mkdir()
    noisy.mkdir()
    for i in range(2):
        arr = write_png(clean / f"c{i}.png", shape=(16, 16), seed=i)
        noisy_img = arr.astype(np.float32) + np.random.default_rng(i).normal(0, 10, arr.shape)
        save_image(from_plane(noisy_img.astype(np.float32), "float32", 255.0), noisy / f"c{i}.tiff")
    write_png(clean / "orphan.png", shape=(16, 16), seed=9)
    report = tmp_path / "report.csv"
    code = cli.main(
        fast_args(
            ["benchmark", "--input", str(noisy), "--clean", str(clean), "--report", str(report)]
        )
    )
    assert code == 0
    manifest = json.loads((tmp_path / "report_manifest.json").read_text())
    skipped = [r for r in manifest["files"] if r["status"] == "skipped"]
    assert len(skipped) == 1 and "orphan" in skipped[0]["input"]
    agg = manifest["aggregate"]
    assert agg["files_ok"] == 2 and agg["files_skipped"] == 1


def test_benchmark_rejects_sigma_and_clean_together(tmp_path):
    src = tmp_path / "c.png"
    write_png(src, shape=(16, 16))
    code = cli.main(
        ["benchmark", "--input", str(src), "--sigma", "25", "--clean", str(src)]
    )
    assert code == 2


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def test_ablate_three_schemes(tmp_path):
    src = tmp_path / "clean"
    src.mkdir()
    write_png(src / "c0.png", shape=(16, 16), seed=4)
    report = tmp_path / "abl" / "ablation.csv"
    code = cli.main(
        fast_args(
            ["ablate", "--input", str(src), "--sigma", "25", "--report", str(report), "--seed", "6"]
        )
    )
    assert code == 0
    for scheme in ("checkerboard", "quad", "exact"):
        assert (tmp_path / "abl" / f"ablation_{scheme}.csv").exists()
    assert (tmp_path / "abl" / "ablation_ablation.png").exists()
    manifest = json.loads((tmp_path / "abl" / "ablation_manifest.json").read_text())
    assert len(manifest["files"]) == 1  # each input accounted exactly once
    assert set(manifest["files"][0]["schemes"]) == {"checkerboard", "quad", "exact"}
    assert "mean_psnr_checkerboard" in manifest["aggregate"]
    agg = manifest["aggregate"]
    assert agg["files_ok"] + agg["files_skipped"] + agg["files_error"] == len(manifest["files"])


def test_ablate_requires_sigma(tmp_path):
    src = tmp_path / "c.png"
    write_png(src)
    assert cli.main(["ablate", "--input", str(src)]) == 2


# ---------------------------------------------------------------------------
# worker-pool parallelism
# ---------------------------------------------------------------------------


def test_threads_preserve_determinism(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    for i in range(2):
        write_png(src / f"i{i}.png", seed=i)
    out_seq = tmp_path / "seq"
    out_par = tmp_path / "par"
    base = ["denoise", "--input", str(src), "--seed", "5"]
    assert cli.main(fast_args([*base, "--output", str(out_seq)])) == 0
    assert cli.main(fast_args([*base, "--output", str(out_par), "--threads", "2"])) == 0
    for name in ("i0.png", "i1.png"):
        assert (out_seq / name).read_bytes() == (out_par / name).read_bytes()
