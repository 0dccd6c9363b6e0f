import json
import shutil

import numpy as np
import pytest

from rafsel.cli import build_parser, main, parse_mask
from rafsel.exceptions import RafError
from rafsel.features import load_record
from rafsel.generator import CorpusManifest, generate_poisson2d
from rafsel.sparse import write_matrix_market

CATALOG = "cg+none,cg+jacobi,cg+ilu0"
GEN = ["--count", "12", "--families", "poisson", "anisotropic", "--order-min", "1000",
       "--order-max", "1100", "--catalog", CATALOG, "--min-class-count", "0", "-q"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(root / "c"), "--seed", "1"] + GEN) == 0
    assert main(["extract", "--manifest", str(root / "c" / "manifest.jsonl"), "--m", "8",
                 "-q"]) == 0
    return root / "c"


@pytest.fixture(scope="module")
def model(corpus):
    path = corpus / "model.rafm"
    assert main(["train", "--manifest", str(corpus / "manifest.jsonl"), "--features",
                 str(corpus / "features"), "--model", str(path), "--epochs", "2",
                 "--batch-size", "4", "--report", str(corpus / "report.json"), "-q"]) == 0
    return path


class TestParser:
    def test_help_lists_commands(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for cmd in ("gen", "label", "extract", "render", "train", "predict", "eval", "ablate"):
            assert cmd in out

    @pytest.mark.parametrize("cmd", ["gen", "label", "extract", "render", "train", "predict",
                                     "eval", "ablate"])
    def test_subcommand_help(self, cmd, capsys):
        with pytest.raises(SystemExit):
            main([cmd, "--help"])
        assert "--seed" in capsys.readouterr().out

    def test_mask_parsing(self):
        assert parse_mask("min_a,order") == (False, True, True, True, False, True)
        assert parse_mask("all") == (False,) * 6
        assert parse_mask(None) is None
        with pytest.raises(RafError):
            parse_mask("color")

    def test_seed_defaults_to_constant(self):
        args = build_parser().parse_args(["gen", "--out", "x"])
        assert args.seed is None  # resolved to a fixed default in main


class TestPipeline:
    def test_gen(self, corpus):
        manifest = CorpusManifest.read(corpus / "manifest.jsonl")
        assert len(manifest.entries) == 12
        assert len(list((corpus / "matrices").glob("*.mtx"))) == 12

    def test_extract_layout(self, corpus):
        files = sorted((corpus / "features").glob("*.rafb"))
        assert len(files) == 12
        rec = load_record(files[0])
        assert rec.channels.shape == (2, 8, 8) and rec.absolute.shape == (6,)
        assert json.loads(files[0].with_suffix(".rafb.json").read_text())["mode"] == "raf"

    def test_extract_baseline(self, corpus, tmp_path):
        assert main(["extract", "--manifest", str(corpus / "manifest.jsonl"), "--out",
                     str(tmp_path), "--mode", "baseline", "--m", "8", "-q"]) == 0
        rec = load_record(next(tmp_path.glob("*.rafb")))
        assert rec.channels.shape == (3, 8, 8) and rec.absolute is None

    def test_train_writes_model_and_report(self, model, corpus):
        assert model.exists()
        rep = json.loads((corpus / "report.json").read_text())
        assert {"accuracy", "mean_slowdown", "mean_cost", "top_n"} <= set(rep)

    def test_predict(self, model, corpus, capsys):
        mtx = sorted((corpus / "matrices").glob("*.mtx"))[0]
        assert main(["predict", "--model", str(model), "--matrix", str(mtx), "--top", "3",
                     "-q"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 4
        probs = [float(line.split()[-1]) for line in lines[1:]]
        assert probs == sorted(probs, reverse=True)
        assert lines[1].split()[1] in CATALOG.split(",")

    def test_eval(self, model, corpus, tmp_path, capsys):
        out = tmp_path / "eval.json"
        assert main(["eval", "--model", str(model), "--manifest",
                     str(corpus / "manifest.jsonl"), "--features", str(corpus / "features"),
                     "--subset", "all", "--json", str(out), "--table", str(tmp_path / "t.txt"),
                     "-q"]) == 0
        rep = json.loads(out.read_text())
        assert rep["n"] == 12 and 0.0 <= rep["mean_slowdown"] <= 1.0
        assert (tmp_path / "t.txt").read_text().startswith("model")

    def test_render(self, corpus, tmp_path):
        assert main(["render", "--manifest", str(corpus / "manifest.jsonl"), "--out",
                     str(tmp_path), "--m", "8", "--mode", "baseline", "-q"]) == 0
        assert len(list(tmp_path.glob("*.png"))) == 12

    def test_ablate(self, corpus, tmp_path, capsys):
        out = tmp_path / "abl.json"
        assert main(["ablate", "--manifest", str(corpus / "manifest.jsonl"), "--features",
                     str(corpus / "features"), "--seeds", "0", "--epochs", "1",
                     "--batch-size", "4", "--json", str(out), "-q"]) == 0
        rows = json.loads(out.read_text())["rows"]
        assert [r["variant"] for r in rows][0] == "complete" and len(rows) == 8

    def test_missing_model_is_an_error(self, corpus):
        assert main(["eval", "--model", str(corpus / "nope.rafm"), "--manifest",
                     str(corpus / "manifest.jsonl"), "--features", str(corpus / "features"),
                     "-q"]) == 2


class TestLabel:
    @pytest.fixture
    def matrix_dir(self, tmp_path):
        d = tmp_path / "mats"
        d.mkdir()
        for i, n in enumerate((30, 31, 32)):
            write_matrix_market(d / f"p{i}.mtx", generate_poisson2d(n, n))
        (d / "broken.mtx").write_text("%%MatrixMarket matrix coordinate real general\n2 3 1\n")
        return d

    def test_skips_malformed(self, matrix_dir, tmp_path, caplog):
        out = tmp_path / "labels" / "manifest.jsonl"
        assert main(["label", "--matrices", str(matrix_dir), "--out", str(out), "--catalog",
                     CATALOG]) == 0
        manifest = CorpusManifest.read(out)
        assert [e.matrix_id for e in manifest.entries] == ["p0", "p1", "p2"]
        assert any("broken" in r.message for r in caplog.records)
        # relative paths resolve from the manifest location
        assert manifest.resolve(manifest.entries[0], out).exists()

    def test_strict_fails(self, matrix_dir, tmp_path):
        assert main(["label", "--matrices", str(matrix_dir), "--out",
                     str(tmp_path / "m.jsonl"), "--catalog", CATALOG, "--strict", "-q"]) == 1

    def test_rerun_identical(self, matrix_dir, tmp_path):
        a, b = tmp_path / "a" / "m.jsonl", tmp_path / "b" / "m.jsonl"
        for out in (a, b):
            main(["label", "--matrices", str(matrix_dir), "--out", str(out), "--catalog",
                  CATALOG, "-q"])
        assert a.read_bytes() == b.read_bytes()

    def test_all_diverging_is_unlabelable(self, tmp_path):
        d = tmp_path / "mats"
        d.mkdir()
        write_matrix_market(d / "hard.mtx", generate_poisson2d(20, 20))
        out = tmp_path / "m.jsonl"
        assert main(["label", "--matrices", str(d), "--out", str(out), "--catalog", CATALOG,
                     "--max-iters", "2", "-q"]) == 0
        assert CorpusManifest.read(out).entries[0].record.unlabelable


class TestExtractFailures:
    def test_corrupt_matrix(self, corpus, tmp_path):
        work = tmp_path / "c"
        shutil.copytree(corpus, work, ignore=shutil.ignore_patterns("features", "*.rafm"))
        victim = sorted((work / "matrices").glob("*.mtx"))[0]
        victim.write_text("garbage\n")
        args = ["extract", "--manifest", str(work / "manifest.jsonl"), "--out",
                str(tmp_path / "f"), "--m", "8", "-q"]
        assert main(args) == 0
        assert len(list((tmp_path / "f").glob("*.rafb"))) == 11
        assert main(args + ["--strict"]) == 1

    def test_toml_config(self, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text('seed = 5\n[generation]\ncount = 4\nfamilies = ["poisson"]\n'
                       'order_min = 1000\norder_max = 1050\nmin_class_count = 0\n'
                       '[catalog]\nmethods = ["cg+none", "cg+ilu0"]\n')
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "g"), "-q"]) == 0
        manifest = CorpusManifest.read(tmp_path / "g" / "manifest.jsonl")
        assert len(manifest.entries) == 4
        assert manifest.catalog.names == ["cg+none", "cg+ilu0"]
        assert np.all([e.spec.family == "poisson" for e in manifest.entries])
