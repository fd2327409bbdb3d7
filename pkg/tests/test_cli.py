import numpy as np
import pytest

from pavsod.acoustic import encode_bformat
from pavsod.acoustic.audio_io import write_raw, write_wav
from pavsod.cli import main
from pavsod.synth.imageio import read_pgm
from pavsod.tensor.serialize import load_tensor

TINY = "widths = 4,6,8,12\ntransformer_layers = 1\nheads = 2\nffn_mult = 1\nfpn_width = 4\n" \
       "dft_size = 64\nseld_filters = 2\nseld_gru = 4\nseld_fc = 4\nfusion_heads = 2\nbatch = 1\n"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--clips", "4", "--seed", "0", "--out", str(root / "ds")]) == 0
    (root / "tiny.cfg").write_text(TINY)
    return root


def test_synth_writes_manifest(workspace):
    lines = (workspace / "ds" / "manifest.txt").read_text().splitlines()
    assert len(lines) == 4


def test_train_log_is_reproducible(workspace, capsys):
    args = ["train", "--config", str(workspace / "tiny.cfg"), "--steps", "2", "--data", str(workspace / "ds")]
    assert main(args + ["--out", str(workspace / "ck.pavc")]) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first
    rows = first.strip().splitlines()
    assert [r.split("\t")[0] for r in rows] == ["1", "2"]
    assert all(len(r.split("\t")) == 5 for r in rows)


def test_flags_override_file(workspace, capsys):
    args = ["train", "--config", str(workspace / "tiny.cfg"), "--steps", "1", "--data", str(workspace / "ds")]
    assert main(args + ["--set", "lambda_distill=0", "--no-teacher"]) == 0
    fields = capsys.readouterr().out.split("\t")
    assert float(fields[3]) == 0.0 and float(fields[4]) == 0.0


def test_unknown_key_exits_2(workspace, capsys):
    bad = workspace / "bad.cfg"
    bad.write_text("steps = 1\nlearning_rate = 3\n")
    assert main(["train", "--config", str(bad), "--data", str(workspace / "ds")]) == 2
    assert "learning_rate = 3" in capsys.readouterr().err
    assert main(["train", "--set", "bogus=1", "--data", str(workspace / "ds")]) == 2


def test_missing_files_exit_3(workspace):
    assert main(["train", "--config", str(workspace / "none.cfg"), "--data", str(workspace / "ds")]) == 3
    assert main(["train", "--config", str(workspace / "tiny.cfg"), "--data", str(workspace / "nodata")]) == 3
    assert main(["infer", "--checkpoint", str(workspace / "none.pavc"), "--data", str(workspace / "ds"),
                 "--out", str(workspace / "p")]) == 3
    assert main(["doa-probe", "--audio", str(workspace / "none.wav")]) == 3


def test_infer_and_eval(workspace, capsys):
    out = workspace / "pred"
    assert main(["infer", "--checkpoint", str(workspace / "ck.pavc"), "--data", str(workspace / "ds"),
                 "--split", "all", "--out", str(out), "--heatmap"]) == 0
    assert read_pgm(out / "clip_0001" / "mask_0.pgm").shape == (32, 64)
    heat = read_pgm(out / "clip_0001" / "heatmap_2.pgm")
    assert heat.shape == (32, 64) and np.array_equal(heat[:16, :16], np.full((16, 16), heat[0, 0]))
    capsys.readouterr()
    assert main(["eval", "--data", str(workspace / "ds"), "--pred", str(out)]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert len(rows) == 7 and rows[0].startswith("clip_0001/0 ") and rows[-1].startswith("summary ")
    assert main(["eval", "--data", str(workspace / "ds"), "--checkpoint", str(workspace / "ck.pavc")]) == 0


def test_eval_perfect_masks(workspace, capsys):
    assert main(["eval", "--data", str(workspace / "ds"), "--split", "all", "--pred", str(workspace / "ds")]) == 0
    summary = capsys.readouterr().out.strip().splitlines()[-1].split()
    assert summary == ["summary", "0.000000", "1.000000"]


def test_spe_dump(workspace, capsys):
    assert main(["spe-dump", "--width", "32", "--dim", "12", "--out", str(workspace / "spe" / "table")]) == 0
    table = load_tensor(workspace / "spe" / "table.pavt")
    assert table.shape == (16, 32, 12)
    assert (workspace / "spe" / "table.ppm").read_bytes().startswith(b"P6")


@pytest.mark.parametrize("fmt", ["wav", "raw"])
def test_doa_probe(workspace, capsys, fmt):
    rng = np.random.default_rng(0)
    half = [encode_bformat(d, rng.normal(size=1000)).channels for d in ((0, 1, 0), (0, 0, 1))]
    from pavsod.acoustic import AmbisonicClip
    clip = AmbisonicClip(np.concatenate(half, axis=1).astype(np.float32), 8000)
    path = workspace / f"probe.{fmt}"
    (write_wav if fmt == "wav" else write_raw)(path, clip)
    assert main(["doa-probe", "--audio", str(path), "--segment", "1000"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()[1:]
    first, second = (r.split("\t") for r in rows)
    assert float(first[2]) == pytest.approx(90.0, abs=1.0) and float(first[3]) == pytest.approx(0.0, abs=1.0)
    assert float(second[3]) == pytest.approx(90.0, abs=1.0)


def test_doa_probe_silence(workspace, capsys):
    from pavsod.acoustic import AmbisonicClip
    write_wav(workspace / "quiet.wav", AmbisonicClip(np.zeros((4, 500), dtype=np.float32), 8000))
    assert main(["doa-probe", "--audio", str(workspace / "quiet.wav")]) == 0
    assert "no-estimate" in capsys.readouterr().out


def test_grad_check_ops_only(capsys):
    assert main(["grad-check", "--ops-only"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out
