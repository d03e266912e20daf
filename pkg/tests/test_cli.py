import csv
import subprocess
import sys
import time

import pytest

from falkdet.cli import build_parser, main
from falkdet.regions import load_dataset, save_dataset

TINY = ["--num-classes", "2", "--dim", "8", "--images", "3", "--imbalance", "20"]
FAST = ["--m", "40", "--batch", "80", "--nb", "2", "--sigma", "4"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--out", str(root / "train"), *TINY]) == 0
    assert main(["generate", "--out", str(root / "test"), "--split", "test", *TINY]) == 0
    return root


def test_generate_is_loadable_and_deterministic(tmp_path, capsys):
    code, out, _ = run(capsys, "generate", "--out", tmp_path / "a", *TINY, "--imbalance", "50")
    assert code == 0
    counts = dict(kv.split("=") for kv in out.split())
    assert abs(int(counts["negatives"]) / int(counts["positives"]) - 50) <= 0.5
    ds = load_dataset(tmp_path / "a")
    assert len(ds.images) == 3 and ds.d == 8
    run(capsys, "generate", "--out", tmp_path / "b", *TINY, "--imbalance", "50")
    for name in ("features.bin", "proposals.csv", "groundtruth.csv", "meta.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    run(capsys, "generate", "--out", tmp_path / "c", *TINY, "--imbalance", "50", "--seed", "1")
    assert (tmp_path / "a" / "features.bin").read_bytes() != (tmp_path / "c" / "features.bin").read_bytes()


def test_train_and_eval(tiny_data, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--data", tiny_data / "train", "--out", tmp_path / "m", *FAST)
    assert code == 0 and out.startswith("train_seconds=")
    for name in ("ensemble.txt", "train_time.txt", "trace_class0.csv", "trace_class1.csv"):
        assert (tmp_path / "m" / name).exists()
    code, out, _ = run(capsys, "eval", "--model", tmp_path / "m", "--data", tiny_data / "test",
                       "--out", tmp_path / "e")
    assert code == 0 and out.startswith("mAP=")
    report = (tmp_path / "e" / "report.csv").read_text().splitlines()
    assert report[0] == "class,ap,tp,fp,num_gt" and report[-1].startswith("mAP,")
    with open(tmp_path / "e" / "detections.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and set(rows[0]) == {"image_id", "class_id", "x1", "y1", "x2", "y2", "confidence"}


def test_train_random_bkg_trace(tiny_data, tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--data", tiny_data / "train", "--out", tmp_path / "m",
                     "--nb", "0", "--batch", "100", "--m", "30")
    assert code == 0
    lines = (tmp_path / "m" / "trace_class0.csv").read_text().splitlines()
    assert len(lines) == 2


def test_missing_dataset_file(tiny_data, tmp_path, capsys):
    broken = tmp_path / "broken"
    save_dataset(load_dataset(tiny_data / "train"), broken)
    (broken / "groundtruth.csv").unlink()
    code, _, err = run(capsys, "train", "--data", broken, "--out", tmp_path / "m", *FAST)
    assert code != 0 and "groundtruth.csv" in err


def test_eval_dimension_mismatch(tiny_data, tmp_path, capsys):
    run(capsys, "train", "--data", tiny_data / "train", "--out", tmp_path / "m", *FAST)
    run(capsys, "generate", "--out", tmp_path / "other", "--num-classes", "2", "--dim", "5",
        "--images", "2", "--split", "test")
    code, _, err = run(capsys, "eval", "--model", tmp_path / "m", "--data", tmp_path / "other",
                       "--out", tmp_path / "e")
    assert code != 0 and "dimension" in err


def test_sweep_single_m(tiny_data, tmp_path, capsys):
    code, _, _ = run(capsys, "sweep-m", "--data", tiny_data / "train", "--test", tiny_data / "test",
                     "--ms", "30", "--out", tmp_path / "s.csv", "--batch", "80", "--nb", "1")
    assert code == 0
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "M,map,train_seconds,test_seconds" and len(lines) == 2
    assert lines[1].startswith("30,")


def test_cv_command(tiny_data, tmp_path, capsys):
    code, out, _ = run(capsys, "cv", "--data", tiny_data / "train", "--lambdas", "1e-4",
                       "--sigmas", "1e-9,4", "--out", tmp_path / "cv.csv", *FAST)
    assert code == 0 and out.strip() == "lambda=0.0001 sigma=4.0"
    assert len((tmp_path / "cv.csv").read_text().splitlines()) == 3


def test_config_file_precedence(tiny_data, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nm = 30\nlambda = 0.01\nnb=1\nbatch=60\n")
    run(capsys, "train", "--data", tiny_data / "train", "--out", tmp_path / "m", "--config", cfg,
        "--m", "25")
    manifest = (tmp_path / "m" / "ensemble.txt").read_text()
    assert "config.num_centers=25" in manifest and "config.lam=0.01" in manifest
    cfg.write_text("bogus=1\n")
    code, _, err = run(capsys, "train", "--data", tiny_data / "train", "--out", tmp_path / "m",
                       "--config", cfg)
    assert code == 2 and "bogus" in err


def test_help_lists_defaults():
    _, subs = build_parser()
    for name, sub in subs.items():
        text = sub.format_help()
        for action in sub._actions:
            if action.dest in ("help",) or not action.option_strings:
                continue
            assert action.option_strings[-1] in text
            if not action.required and action.default is not None:
                assert "(default:" in text


def test_threads_do_not_change_map(tiny_data, tmp_path, capsys):
    maps = []
    for threads in (1, 2):
        run(capsys, "train", "--data", tiny_data / "train", "--out", tmp_path / f"m{threads}",
            "--threads", threads, *FAST)
        _, out, _ = run(capsys, "eval", "--model", tmp_path / f"m{threads}", "--data",
                        tiny_data / "test", "--out", tmp_path / f"e{threads}")
        maps.append(out.split()[0])
    assert maps[0] == maps[1]
    a = (tmp_path / "e1" / "detections.csv").read_bytes()
    assert a == (tmp_path / "e2" / "detections.csv").read_bytes()


def test_default_training_is_fast(tmp_path, capsys):
    run(capsys, "generate", "--out", tmp_path / "d", "--images", "10")
    t0 = time.perf_counter()
    code, _, _ = run(capsys, "train", "--data", tmp_path / "d", "--out", tmp_path / "m")
    assert code == 0 and time.perf_counter() - t0 < 60


def test_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "falkdet.cli", "--version"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "0.1.0" in res.stdout
