import json

import pytest

from endoscopy_xai.cli import main
from endoscopy_xai.data import SplitManifest
from endoscopy_xai.synthetic import make_color_corpus

TOY = ["--set", "model.backbone=stub-3", "--set", "model.weights=none"]


@pytest.fixture
def corpus(tmp_path):
    return make_color_corpus(tmp_path / "corpus", num_classes=3, per_class=20, seed=0)


def run(out, command, *extra, root=None, ratios="0.8,0.1,0.1"):
    args = [command, "--output", str(out), "--set", f"data.ratios={ratios}", *TOY]
    if root is not None:
        args += ["--set", f"data.root={root}"]
    return main([*args, *extra])


@pytest.fixture
def trained(tmp_path, corpus, quiet):
    out = tmp_path / "run"
    assert run(out, "prepare", root=corpus) == 0
    assert run(out, "train", "--set", "train.epochs=3") == 0
    return out


class TestPrepare:
    def test_counts_and_idempotent(self, tmp_path, corpus, capsys):
        out = tmp_path / "run"
        assert run(out, "prepare", root=corpus) == 0
        first = (out / "manifest.csv").read_bytes()
        printed = capsys.readouterr().out
        assert "3 classes, 60 images" in printed
        assert printed.strip().splitlines()[-1].split() == ["total", "48", "6", "6"]
        assert run(out, "prepare", root=corpus) == 0
        assert (out / "manifest.csv").read_bytes() == first
        assert (out / "resolved_config_prepare.txt").exists()

    def test_bad_file_is_listed_not_fatal(self, tmp_path, corpus, capsys):
        (corpus / "class_0" / "broken.png").write_bytes(b"nope")
        out = tmp_path / "run"
        assert run(out, "prepare", root=corpus) == 0
        assert "broken.png" in (out / "rejects.csv").read_text()
        assert "undecodable" in capsys.readouterr().err

    def test_missing_root_is_data_error(self, tmp_path):
        assert run(tmp_path / "run", "prepare", root=tmp_path / "missing") == 2

    def test_unknown_key_is_user_error(self, tmp_path, corpus):
        assert run(tmp_path / "run", "prepare", "--set", "train.nonsense=1", root=corpus) == 1

    def test_config_file_and_precedence(self, tmp_path, corpus):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"# toy run\nseed = 5\ndata.root = {corpus}\noutput = {tmp_path / 'ignored'}\n")
        out = tmp_path / "run"
        assert main(["prepare", "--config", str(cfg), "--output", str(out), "--seed", "9"]) == 0
        resolved = (out / "resolved_config_prepare.txt").read_text()
        assert "seed = 9" in resolved and f"output = {out}" in resolved


class TestTrain:
    def test_outputs(self, trained):
        for name in ("checkpoint.pt", "checkpoint.pt.json", "history.csv", "run_metadata.json",
                     "loss_curve.png", "accuracy_curve.png", "curves.json"):
            assert (trained / name).exists(), name
        meta = json.loads((trained / "run_metadata.json").read_text())
        assert meta["total_epochs"] == 3 and meta["config"]["model.backbone"] == "stub-3"
        assert len((trained / "history.csv").read_text().strip().splitlines()) == 4

    def test_zero_epochs(self, tmp_path, corpus, quiet):
        out = tmp_path / "run"
        run(out, "prepare", root=corpus)
        assert run(out, "train", "--set", "train.epochs=0") == 0
        assert (out / "checkpoint.pt").exists()
        assert len((out / "history.csv").read_text().strip().splitlines()) == 1

    def test_without_manifest(self, tmp_path):
        assert run(tmp_path / "run", "train") == 1


class TestEvaluate:
    def test_report(self, trained, capsys):
        assert run(trained, "evaluate", "--checkpoint", str(trained / "checkpoint.pt")) == 0
        report = json.loads((trained / "report.json").read_text())
        assert sum(map(sum, report["confusion"]["counts"])) == 6
        assert (trained / "confusion_matrix.png").exists()
        assert "checkpoint" in capsys.readouterr().out

    def test_missing_checkpoint(self, trained):
        assert run(trained, "evaluate", "--checkpoint", str(trained / "nope.pt")) == 1

    def test_empty_split(self, tmp_path, corpus, quiet):
        out = tmp_path / "run"
        run(out, "prepare", root=corpus, ratios="0.9,0.1,0")
        run(out, "train", "--set", "train.epochs=1", ratios="0.9,0.1,0")
        assert not SplitManifest.load(out / "manifest.csv").split("test")
        assert run(out, "evaluate", "--checkpoint", str(out / "checkpoint.pt"), ratios="0.9,0.1,0") == 2


class TestCompare:
    def test_two_checkpoints(self, trained, tmp_path, corpus, quiet):
        other = tmp_path / "other"
        run(other, "prepare", root=corpus)
        run(other, "train", "--set", "train.epochs=1", "--seed", "1")
        code = run(trained, "compare", f"first={trained / 'checkpoint.pt'}", f"second={other / 'checkpoint.pt'}")
        assert code == 0
        rows = (trained / "comparison.csv").read_text().strip().splitlines()
        assert [r.split(",")[0] for r in rows[1:]] == ["first", "second"]
        assert (trained / "comparison.txt").exists()

    def test_failed_row(self, trained, capsys):
        code = run(trained, "compare", f"good={trained / 'checkpoint.pt'}", f"bad={trained / 'missing.pt'}")
        assert code == 2
        rows = (trained / "comparison.csv").read_text().strip().splitlines()
        assert rows[2].startswith("bad,") and rows[2].endswith("failed")
        assert "bad failed" in capsys.readouterr().err


class TestExplain:
    def test_three_images(self, trained, corpus):
        images = [str(corpus / "class_0" / f"img_00{i}.png") for i in range(3)]
        args = ["--checkpoint", str(trained / "checkpoint.pt"), "--set", "lime.num_samples=200", *images]
        assert run(trained, "explain", *args) == 0
        out = trained / "explanations"
        first = {p.name: p.read_bytes() for p in out.iterdir()}
        assert len(first) == 9
        side = json.loads((out / "img_000_explanation.json").read_text())
        cfg = side["config"]
        assert (cfg["num_samples"], cfg["num_features"], cfg["positive_only"], cfg["hide_color"], cfg["min_weight"]) \
            == (200, 5, True, 0.0, 0.0)
        assert run(trained, "explain", *args) == 0
        assert {p.name: p.read_bytes() for p in out.iterdir()} == first

    def test_default_lime_settings_echoed(self, trained, corpus):
        image = str(corpus / "class_1" / "img_000.png")
        assert run(trained, "explain", "--checkpoint", str(trained / "checkpoint.pt"), image) == 0
        cfg = json.loads((trained / "explanations" / "img_000_explanation.json").read_text())["config"]
        assert (cfg["num_samples"], cfg["num_features"], cfg["positive_only"], cfg["hide_color"], cfg["min_weight"]) \
            == (1000, 5, True, 0.0, 0.0)

    def test_unreadable_image(self, trained, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"x")
        assert run(trained, "explain", "--checkpoint", str(trained / "checkpoint.pt"), str(bad)) == 2
