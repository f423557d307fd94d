import csv
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from vimdisp import cli, data_io, metrics
from vimdisp.errors import ValidationError

FIXTURE = Path(__file__).parent / "fixtures" / "reference_bench.csv"
SMALL = ["--width", "64", "--height", "32", "--model-dim", "16"]


def run(*argv):
    assert cli.main([str(a) for a in argv]) == 0


def test_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "vimdisp.cli", "--help"], capture_output=True, text=True, check=True)
    for cmd in cli.COMMANDS:
        assert cmd in out.stdout


def test_train_writes_log_and_checkpoints(tmp_path):
    run("train", "--iters", 10, "--ckpt-every", 5, "--lr", 1e-3, "--out", tmp_path, *SMALL)
    with open(tmp_path / "loss_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iter", "loss", "epe_train"]
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 11))
    assert all(np.isfinite(float(r[1])) for r in rows[1:])
    for name in ("checkpoint.npz", "ckpt_000005.npz", "ckpt_000010.npz", "effective_config.txt"):
        assert (tmp_path / name).exists()
    assert "iters = 10" in (tmp_path / "effective_config.txt").read_text()


def test_training_is_reproducible(tmp_path):
    for sub in ("a", "b"):
        run("train", "--iters", 3, "--seed", 4, "--out", tmp_path / sub, *SMALL)
    assert (tmp_path / "a" / "loss_log.csv").read_text() == (tmp_path / "b" / "loss_log.csv").read_text()


def test_config_file_precedence(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# desk run\niters = 7\nlr = 0.5\nseed: 3\n")
    args = cli.build_parser().parse_args(["train", "--config", str(conf), "--lr", "0.25"])
    cfg = cli.resolve_config(args)
    assert (cfg.iters, cfg.lr, cfg.seed, cfg.batch) == (7, 0.25, 3, 2)
    conf.write_text("bogus = 1\n")
    with pytest.raises(ValidationError):
        cli.resolve_config(cli.build_parser().parse_args(["train", "--config", str(conf)]))


def test_eval_and_checkpoint_flow(tmp_path):
    run("train", "--iters", 2, "--out", tmp_path, *SMALL)
    run("eval", "--checkpoint", tmp_path / "checkpoint.npz", "--out", tmp_path, *SMALL)
    rec = metrics.read_csv(tmp_path / "eval.csv")
    assert len(rec) == 1 and rec[0].dataset == "synthetic" and rec[0].epe >= 0


def test_bench_schema(tmp_path):
    run("bench", "--out", tmp_path, *SMALL)
    text = (tmp_path / "bench.csv").read_text()
    assert text.splitlines()[0] == ",".join(metrics.CSV_HEADER)
    (rec,) = metrics.read_csv(tmp_path / "bench.csv")
    assert rec.fps_min <= rec.fps_avg <= rec.fps_max
    assert rec.epe is not None and rec.mem_mib is not None
    md = (tmp_path / "bench.md").read_text()
    assert "Comparative performance" in md and "Speed statistics" in md


def test_bench_report_only_recomputes_somer(tmp_path):
    run("bench", "--records", FIXTURE, "--out", tmp_path)
    printed = {(r.dataset, r.model): r.somer for r in metrics.read_csv(FIXTURE)}
    ours = {(r.dataset, r.model): r.somer for r in metrics.read_csv(tmp_path / "bench.csv")}
    assert ours.keys() == printed.keys()
    assert round(ours[("KITTI", "I-GEV")], 3) == 1.173
    assert ours[("KITTI", "Proposed")] == pytest.approx(6.39, abs=0.005)
    assert ours[("All datasets", "Proposed")] == pytest.approx(5.80, abs=0.005)
    back = metrics.records_from_markdown((tmp_path / "bench.md").read_text())
    assert {(r.dataset, r.model) for r in back} == set(printed)


def test_bench_sleep_adapter_rate(tmp_path):
    run("bench", "--adapter", "sleep:0.1", "--out", tmp_path, *SMALL)
    (rec,) = metrics.read_csv(tmp_path / "bench.csv")
    assert rec.model == "sleep0.1" and rec.epe is not None
    assert rec.fps_avg == pytest.approx(10, rel=0.05)


def test_bench_reads_manifests(tmp_path):
    s = data_io.gen_synthetic(32, 16, [(2, None)], seed=0)
    data_io.save_image(tmp_path / "l.png", s.left)
    data_io.save_image(tmp_path / "r.png", s.right)
    data_io.write_kitti_disparity(tmp_path / "g.png", s.gt)
    (tmp_path / "tiny.txt").write_text("l.png\tr.png\tg.png\n")
    run("bench", "--adapter", "sleep:0", "--manifest", tmp_path / "tiny.txt", "--out", tmp_path / "o")
    (rec,) = metrics.read_csv(tmp_path / "o" / "bench.csv")
    assert rec.dataset == "tiny" and rec.epe == pytest.approx(2.0, abs=0.01)


def test_render_from_file(tmp_path):
    disp = np.array([[1.0, 5.0], [3.0, np.inf]], dtype=np.float32)
    data_io.write_pfm(tmp_path / "d.pfm", disp)
    run("render", "--input", tmp_path / "d.pfm", "--out", tmp_path / "a")
    run("render", "--input", tmp_path / "d.pfm", "--out", tmp_path / "b")
    img = data_io.load_image(tmp_path / "a" / "d_heat.png")
    np.testing.assert_array_equal(img[0, 0], [1, 0, 0])  # minimum is red
    np.testing.assert_array_equal(img[0, 1], [0, 0, 1])  # maximum is blue
    np.testing.assert_array_equal(img[1, 1], [0, 0, 0])  # invalid is black
    assert img[1, 0, 1] == 1.0  # midpoint sits at green
    assert (tmp_path / "a" / "d_heat.png").read_bytes() == (tmp_path / "b" / "d_heat.png").read_bytes()


def test_render_model_predictions(tmp_path):
    run("render", "--out", tmp_path, *SMALL)
    assert len(list(tmp_path.glob("*_heat.png"))) == 8


def test_ablate_rows(tmp_path):
    run("ablate", "--rounds", 1, "--out", tmp_path, *SMALL)
    recs = metrics.read_csv(tmp_path / "ablation.csv")
    assert [r.model for r in recs] == ["Model w 1-pass w SA", "Model w 2-pass w/o SA", "Proposed model"]
    md = (tmp_path / "ablation.md").read_text()
    assert md.splitlines()[0].startswith("| Datasets | Metrics |")
