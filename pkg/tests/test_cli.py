import csv
import shutil
import subprocess
import time

import numpy as np
import pytest

from segforest import data
from segforest.cli import main
from segforest.engine import argmax_lowest
from segforest.forest import deserialize
from segforest.renderer import RendererConfig, evaluate_points

FAST = ["--steps", "60", "--restarts", "2"]


def write_mask(path, mask):
    path.write_bytes(data.save_mask(np.asarray(mask, np.uint8)))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def report_accuracy(path) -> float:
    rows = read_csv(path)
    assert rows[0][:5] == ["scope", "block_x", "block_y", "accuracy", "miou"]
    assert rows[1][0] == "image"
    return float(rows[1][3])


@pytest.fixture
def partition_mask(tmp_path):
    return write_mask(tmp_path / "part.pgm", data.gen_partition_toy(data.ToyConfig(), 0))


# ---- encode


def test_encode_partition_toy_with_kd_tree(tmp_path, partition_mask, capsys):
    out, rep = tmp_path / "m.sff", tmp_path / "r.csv"
    code = main(["encode", partition_mask, "-o", str(out), "--report", str(rep),
                 "--tree", "kd:2", "--classes", "8"])
    assert code == 0
    assert report_accuracy(rep) == 1.0
    assert "accuracy 1" in capsys.readouterr().out
    rows = read_csv(rep)
    assert len(rows) == 2 + 16 * 16
    assert all(r[0] == "block" for r in rows[2:])
    assert deserialize(out.read_bytes()).spec.shapes[0].codes[0] == "BX"


def test_encode_constant_mask(tmp_path):
    mask = write_mask(tmp_path / "c.pgm", np.full((16, 16), 2))
    rep = tmp_path / "r.csv"
    assert main(["encode", mask, "-o", str(tmp_path / "m.sff"), "--report", str(rep)]) == 0
    assert report_accuracy(rep) == 1.0


def test_encode_missing_file(tmp_path, capsys):
    assert main(["encode", str(tmp_path / "nope.pgm"), "-o", str(tmp_path / "m.sff")]) == 2
    assert "cannot read" in capsys.readouterr().err


def test_encode_label_outside_classes_is_contract_violation(tmp_path):
    mask = write_mask(tmp_path / "c.pgm", np.full((8, 8), 5))
    assert main(["encode", mask, "-o", str(tmp_path / "m.sff"), "--classes", "3"]) == 3


@pytest.mark.parametrize("flags", [["--mu", "1,1,0,0"], ["--tree", "bsp:blob:2"],
                                   ["--steps", "0"], ["--subsets", "0|0"], ["--lr", "-1"],
                                   ["--mode", "soft"]])
def test_invalid_flags_are_rejected_before_work(tmp_path, flags, capsys):
    mask = write_mask(tmp_path / "c.pgm", np.zeros((8, 8)))
    out = tmp_path / "m.sff"
    assert main(["encode", mask, "-o", str(out), *flags]) == 2
    assert not out.exists()
    assert "usage" in capsys.readouterr().err


def test_encode_pads_unaligned_masks(tmp_path):
    mask = write_mask(tmp_path / "c.pgm", np.ones((8, 9)))
    out = tmp_path / "m.sff"
    assert main(["encode", mask, "-o", str(out), *FAST]) == 0
    assert deserialize(out.read_bytes()).grid_size == (2, 1)


# ---- round trip


def test_encode_render_eval_matches_report(tmp_path):
    rng = np.random.default_rng(0)
    gt = np.kron(rng.integers(0, 4, (3, 4)), np.ones((7, 7), int))[:16, :24]
    gt_path = write_mask(tmp_path / "gt.pgm", gt)
    sff, rep, pred, met = (tmp_path / n for n in ("m.sff", "r.csv", "p.pgm", "e.csv"))
    assert main(["encode", gt_path, "-o", str(sff), "--report", str(rep), *FAST]) == 0
    assert main(["render", str(sff), "-o", str(pred)]) == 0
    assert main(["eval", str(pred), gt_path, "-o", str(met), "--classes", "4"]) == 0
    rows = {(r[0], r[1]): r[2] for r in read_csv(met)[1:]}
    assert float(rows[("accuracy", "")]) == report_accuracy(rep)
    assert float(rows[("miou", "")]) == float(read_csv(rep)[1][4])


def encode_small(tmp_path, *extra):
    rng = np.random.default_rng(1)
    gt = np.kron(rng.integers(0, 3, (2, 2)), np.ones((8, 8), int))
    gt[3:6, 4:12] = 1
    gt_path = write_mask(tmp_path / "gt.pgm", gt)
    sff = tmp_path / "m.sff"
    assert main(["encode", gt_path, "-o", str(sff), *FAST, *extra]) == 0
    return gt_path, sff


def test_render_scale_two_samples_the_same_function(tmp_path):
    _, sff = encode_small(tmp_path)
    out = tmp_path / "x2.pgm"
    assert main(["render", str(sff), "-o", str(out), "--scale", "2"]) == 0
    fine = data.load_mask(out.read_bytes())
    assert fine.shape == (32, 32)
    model = deserialize(sff.read_bytes())
    # scale-2 pixel centers written in block-normalized coordinates
    u = (np.arange(16) + 0.5) / 8 - 1
    pts = np.stack(np.meshgrid(u, u), axis=-1).reshape(-1, 2)
    for by in range(2):
        for bx in range(2):
            z = evaluate_points(model, bx, by, pts, RendererConfig())
            block = fine[by * 16:(by + 1) * 16, bx * 16:(bx + 1) * 16]
            np.testing.assert_array_equal(block.ravel(), argmax_lowest(z[None])[0])


def test_render_odd_scale_shares_native_centers(tmp_path):
    _, sff = encode_small(tmp_path)
    one, three = tmp_path / "x1.pgm", tmp_path / "x3.pgm"
    assert main(["render", str(sff), "-o", str(one)]) == 0
    assert main(["render", str(sff), "-o", str(three), "--scale", "3"]) == 0
    native = data.load_mask(one.read_bytes())
    fine = data.load_mask(three.read_bytes())
    np.testing.assert_array_equal(fine[1::3, 1::3], native)


def test_render_visualizations(tmp_path):
    gt_path, sff = encode_small(tmp_path)
    rv, pv = tmp_path / "rv.ppm", tmp_path / "pv.ppm"
    assert main(["render", str(sff), "-o", str(tmp_path / "p.pgm"), "--regionvis", str(rv),
                 "--purityvis", str(pv), "--gt", gt_path]) == 0
    assert data.load_ppm(rv.read_bytes()).shape == (16, 16, 3)
    assert data.load_ppm(pv.read_bytes()).shape == (16, 16, 3)
    assert main(["render", str(sff), "-o", str(tmp_path / "p.pgm"),
                 "--purityvis", str(pv)]) == 2


def test_render_corrupt_model(tmp_path, capsys):
    bad = tmp_path / "bad.sff"
    bad.write_bytes(b"SFF1\nblock_size 8 classes x\n")
    assert main(["render", str(bad), "-o", str(tmp_path / "p.pgm")]) == 2
    assert "line 2" in capsys.readouterr().err


# ---- eval


def test_eval_identical_masks(tmp_path, capsys):
    m = write_mask(tmp_path / "a.pgm", [[0, 1], [2, 2]])
    assert main(["eval", m, m]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[-1] == ["miou", "", "1"]


def test_eval_ignore_class_absent_from_report(tmp_path, capsys):
    m = write_mask(tmp_path / "a.pgm", [[0, 1], [2, 2]])
    assert main(["eval", m, m, "--ignore-class", "1"]) == 0
    classes = [r.split(",")[1] for r in capsys.readouterr().out.splitlines() if r.startswith("iou")]
    assert classes == ["0", "2"]


def test_eval_dimension_mismatch(tmp_path):
    a = write_mask(tmp_path / "a.pgm", np.zeros((2, 2)))
    b = write_mask(tmp_path / "b.pgm", np.zeros((2, 3)))
    assert main(["eval", a, b]) == 3


# ---- toygen


def test_toygen_partition_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["toygen", "partition", "--n", "10", "--seed", "1",
                     "--outdir", str(tmp_path / d)]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(names) == 20
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    first = data.load_mask((tmp_path / "a" / "partition_0000.pgm").read_bytes())
    np.testing.assert_array_equal(first, data.gen_partition_toy(data.ToyConfig(), 1))


def test_toygen_circles_pair(tmp_path):
    assert main(["toygen", "circles", "--n", "1", "--outdir", str(tmp_path)]) == 0
    mask = data.load_mask((tmp_path / "circles_0000.pgm").read_bytes())
    rgb = data.load_ppm((tmp_path / "circles_0000.ppm").read_bytes())
    np.testing.assert_array_equal(rgb, data.PALETTE[mask])


def test_toygen_invalid_kind(tmp_path):
    assert main(["toygen", "squares", "--outdir", str(tmp_path)]) == 2


# ---- gradcheck


def test_gradcheck_rejects_zero_trials():
    assert main(["gradcheck", "--trials", "0"]) == 2


def test_gradcheck_small_run(capsys):
    assert main(["gradcheck", "--trials", "5"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-1] == "ALL PASS"
    assert out[-2].startswith("excluded near kinks: ")
    assert all("PASS" in line for line in out[:-2])


# ---- toyexp


def test_toyexp_partition_smoke(tmp_path):
    out = tmp_path / "t.csv"
    t0 = time.perf_counter()
    assert main(["toyexp", "partition-trees", "--runs", "1", "-o", str(out)]) == 0
    assert time.perf_counter() - t0 < 60
    rows = read_csv(out)
    assert rows[0] == ["structure", "run", "accuracy", "perfect", "steps_to_perfect"]
    assert [r[0] for r in rows[1:3]] == ["bsp:line:2", "kd:2"]


def test_toyexp_circles_smoke(tmp_path):
    out = tmp_path / "t.csv"
    t0 = time.perf_counter()
    assert main(["toyexp", "circles-sdf", "--runs", "1", "-o", str(out)]) == 0
    assert time.perf_counter() - t0 < 60
    rows = read_csv(out)
    assert [r[0] for r in rows if r][-3:] == ["f1", "f3", "f3-f1"]


def test_toyexp_invalid(tmp_path):
    assert main(["toyexp", "spirals"]) == 2
    assert main(["toyexp", "circles-sdf", "--runs", "0"]) == 2


# ---- determinism and packaging


def test_outputs_identical_across_thread_counts(tmp_path):
    gt = data.gen_partition_toy(data.ToyConfig(image_size=64), 3)
    gt_path = write_mask(tmp_path / "gt.pgm", gt)
    blobs = []
    for threads in ("1", "3"):
        sff, rep = tmp_path / f"m{threads}.sff", tmp_path / f"r{threads}.csv"
        assert main(["encode", gt_path, "-o", str(sff), "--report", str(rep), "--threads",
                     threads, "--block-size", "4", *FAST]) == 0
        blobs.append((sff.read_bytes(), rep.read_bytes()))
    assert blobs[0] == blobs[1]


@pytest.mark.skipif(shutil.which("segforest") is None, reason="console script not installed")
def test_console_script():
    res = subprocess.run(["segforest", "eval", "/nonexistent.pgm", "/nonexistent.pgm"],
                         capture_output=True, text=True)
    assert res.returncode == 2 and "cannot read" in res.stderr
    res = subprocess.run(["segforest", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "encode" in res.stdout
