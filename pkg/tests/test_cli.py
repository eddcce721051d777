import subprocess
import sys

import pytest

from deeptopo.cli import EXIT_DATA, EXIT_GRADCHECK, EXIT_OK, EXIT_USAGE, main


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert main(["gen-data", "--out", str(root / "train"), "--count", "4", "--seed", "1"]) == 0
    assert main(["gen-data", "--out", str(root / "eval"), "--count", "3", "--seed", "2"]) == 0
    return root


def common(corpus, out):
    return ["--data-dir", corpus / "train", "--eval-dir", corpus / "eval", "--out-dir", out,
            "--epochs", "1", "--batch-size", "2"]


def test_gen_data(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--out", tmp_path / "a", "--count", "5", "--size", "48", "--seed", "3")
    assert code == EXIT_OK
    assert out.strip() == str(tmp_path / "a" / "manifest.tsv")
    assert len((tmp_path / "a" / "manifest.tsv").read_text().splitlines()) == 5
    run(capsys, "gen-data", "--out", tmp_path / "b", "--count", "5", "--size", "48", "--seed", "3")
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    code, out, _ = run(capsys, "gen-data", "--out", tmp_path / "z", "--count", "3", "--size", "48",
                       "--zones", "abyssal")
    assert code == 0 and set(ln.split("\t")[1] for ln in (tmp_path / "z" / "manifest.tsv").read_text().splitlines()) == {"abyssal"}


@pytest.mark.parametrize("argv", [
    ["gen-data", "--out", "X", "--size", "8"],
    ["gen-data", "--out", "X", "--count", "0"],
    ["gen-data", "--out", "X", "--zones", "shallow"],
    ["gen-data", "--out", "X", "--seed", "-1"],
    ["gen-data"],
    [],
    ["nonsense"],
])
def test_gen_data_refusals(tmp_path, capsys, argv):
    argv = [str(tmp_path / "X") if a == "X" else a for a in argv]
    code, out, err = run(capsys, *argv)
    assert code == EXIT_USAGE
    assert err.startswith("error: ") and err.count("\n") == 1
    assert not (tmp_path / "X").exists()


def test_train_and_eval(corpus, tmp_path, capsys):
    out = tmp_path / "run"
    code, text, _ = run(capsys, "train", *common(corpus, out), "--lambda", "0")
    assert code == EXIT_OK
    assert "l_seg" in text and "l_rec" in text and "l_total" in text
    for sub in ("final", "best"):
        assert (out / sub / "manifest.txt").is_file()
    for line in (out / "train_steps.tsv").read_text().splitlines()[1:]:
        _, _, seg, _, tot = line.split("\t")
        assert seg == tot
    code, text, _ = run(capsys, "eval", *common(corpus, out), "--lambda", "0", "--report-dir", tmp_path / "rep")
    assert code == EXIT_OK
    rows = (tmp_path / "rep" / "report.tsv").read_text().splitlines()
    assert len(rows) == 1 + 3 + 1
    assert len(list((tmp_path / "rep" / "predictions").glob("*.pgm"))) == 3
    assert "encoder_init" in (tmp_path / "rep" / "report.txt").read_text()


def test_eval_refuses_mismatched_checkpoint(corpus, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(capsys, "train", *common(corpus, out), "--quiet")[0] == 0
    code, _, err = run(capsys, "eval", *common(corpus, out), "--ablation", "baseline",
                       "--report-dir", tmp_path / "rep")
    assert code == EXIT_DATA and "mismatch" in err and err.count("\n") == 1
    assert not (tmp_path / "rep").exists()


def test_eval_gt_bypass(corpus, tmp_path, capsys):
    code, text, _ = run(capsys, "eval", *common(corpus, tmp_path / "o"), "--gt-as-pred",
                        "--report-dir", tmp_path / "rep")
    assert code == EXIT_OK
    head, *rows = (tmp_path / "rep" / "report.tsv").read_text().splitlines()
    cols = head.split("\t")
    mean = dict(zip(cols, rows[-1].split("\t")))
    for k in ("s_alpha", "f_beta_w", "mean_e", "iou", "skeleton_recall"):
        assert float(mean[k]) == 1.0
    assert float(mean["mae"]) == 0.0


@pytest.mark.parametrize("extra,code", [
    (["--lambda", "1.5"], EXIT_USAGE),
    (["--epochs", "0"], EXIT_USAGE),
    (["--set", "image_size=64"], EXIT_USAGE),
    (["--set", "nonsense=1"], EXIT_USAGE),
    (["--profile", "paper", "--lambda", "0.2"], EXIT_USAGE),
])
def test_train_refusals_write_nothing(corpus, tmp_path, capsys, extra, code):
    out = tmp_path / "never"
    got, _, err = run(capsys, "train", *common(corpus, out), *extra)
    assert got == code and err.startswith("error: ") and err.count("\n") == 1
    assert not out.exists()


def test_missing_data_is_a_data_error(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data-dir", tmp_path / "nothing", "--out-dir", tmp_path / "o")
    assert code == EXIT_DATA and err.count("\n") == 1
    assert not (tmp_path / "o").exists()


def test_checkpoint_missing(corpus, tmp_path, capsys):
    code, _, err = run(capsys, "eval", *common(corpus, tmp_path / "o"), "--checkpoint", tmp_path / "none")
    assert code == EXIT_DATA and err.startswith("error: ")


def test_gradcheck_subset_and_injection(capsys):
    code, out, _ = run(capsys, "gradcheck", "--ops", "relu,conv2d_3x3,warped_conv", "--skip-model")
    assert code == EXIT_OK
    assert "relu" in out and "worst" in out and "negative_control" in out and "fails as expected" in out
    code, out, _ = run(capsys, "gradcheck", "--ops", "relu", "--skip-model", "--inject-wrong-grad")
    assert code == EXIT_GRADCHECK
    code, _, err = run(capsys, "gradcheck", "--ops", "nope")
    assert code == EXIT_USAGE
    code, out, _ = run(capsys, "gradcheck", "--list")
    assert code == 0 and "wcap_forward" in out.split()


def test_sweep_and_ablate_tables(corpus, tmp_path, capsys):
    out = tmp_path / "exp"
    args = common(corpus, out)
    code, text, _ = run(capsys, "sweep-lambda", *args, "--lambdas", "0,0.05,0.1,0.2,0.5")
    assert code == EXIT_OK
    table = (out / "sweep_lambda.tsv").read_text()
    lines = [ln for ln in table.splitlines() if not ln.startswith("#")]
    assert lines[0].split("\t") == ["lambda", "s_alpha", "f_beta_w", "mean_e", "mae"]
    assert [ln.split("\t")[0] for ln in lines[1:]] == ["0", "0.05", "0.1", "0.2", "0.5"]
    run(capsys, "sweep-lambda", *args, "--lambdas", "0,0.05,0.1,0.2,0.5")
    assert (out / "sweep_lambda.tsv").read_text() == table

    code, text, _ = run(capsys, "ablate", *args)
    assert code == EXIT_OK
    abl = (out / "ablation.tsv").read_text().splitlines()
    rows = [ln.split("\t") for ln in abl if not ln.startswith("#")]
    head = rows[0]
    body = [dict(zip(head, r)) for r in rows[1:]]
    assert [r["variant"] for r in body] == ["B", "B+WCAP", "B+ATRM", "Ours"]
    assert body[0]["wcap_params"] == "0" and body[0]["astb_params"] == "0"
    assert len({r["train_data"] for r in body}) == 1
    assert any(ln.startswith("# encoder_init") for ln in abl)
    # the full-model row reuses the λ=0.1 run trained by the sweep
    assert "reusing" in text

    code, _, err = run(capsys, "sweep-lambda", *args, "--lambdas", "0,2")
    assert code == EXIT_USAGE
    code, _, err = run(capsys, "ablate", *args, "--variants", "B,C")
    assert code == EXIT_USAGE


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "deeptopo.cli", "gen-data", "--out", str(tmp_path / "d"),
                        "--size", "8"], capture_output=True, text=True)
    assert r.returncode == EXIT_USAGE
    assert r.stderr.startswith("error:") and r.stderr.count("\n") == 1 and r.stdout == ""
