import json
import time

import pytest

from wsgully import cli
from wsgully import io as wio
from wsgully.config import ConfigError, load_config, parse_config

SMALL_SYNTH = {"n_locations": 600, "n_images": 4, "dim": 4, "separation": 0.8}


def write_config(directory, **sections):
    cfg = {
        "synth": SMALL_SYNTH,
        "paths": {
            "output_dir": "out",
            "manifest": "out/manifest.jsonl",
            "features": "out/features.egf",
            "ground_truth": "out/ground_truth.csv",
        },
        "lfs": [
            {"name": "a", "kind": "synthetic", "accuracy": 0.85, "abstain_rate": 0.1, "seed": 1},
            {"name": "b", "kind": "synthetic", "accuracy": 0.75, "abstain_rate": 0.1, "seed": 2},
            {"name": "c", "kind": "synthetic", "accuracy": 0.65, "abstain_rate": 0.1, "seed": 3},
        ],
        "label_model": {"epochs": 100},
        "student": {"epochs": 5, "batch_size": 64},
    }
    cfg.update(sections)
    path = directory / "pipeline.json"
    path.write_text(json.dumps(cfg))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def full_chain(directory):
    cfg = write_config(directory)
    assert run("synth", "--config", cfg, "--seed", 3) == 0
    for stage in ("label", "fit", "infer", "train"):
        assert run(stage, "--config", cfg) == 0, stage
    assert run("eval", "--config", cfg, "--source", "student") == 0
    return directory / "out"


def snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


# -- synth -----------------------------------------------------------------------


def test_synth_writes_aligned_files(tmp_path):
    assert run("synth", "--out", tmp_path / "o", "--seed", 1) == 0
    out = tmp_path / "o"
    names = sorted(p.name for p in out.iterdir())
    assert names == ["features.egf", "features.egf.ids", "ground_truth.csv", "manifest.jsonl", "synthetic_label_matrix.csv"]
    ids = wio.read_manifest(out / "manifest.jsonl").location_ids
    assert wio.read_label_matrix(out / "synthetic_label_matrix.csv").location_ids == ids
    assert wio.read_feature_store(out / "features.egf").location_ids == ids
    assert wio.read_ground_truth(out / "ground_truth.csv").location_ids == ids
    assert len(ids) == 1000


def test_synth_is_byte_identical(tmp_path):
    run("synth", "--out", tmp_path / "a", "--seed", 9)
    run("synth", "--out", tmp_path / "b", "--seed", 9)
    assert snapshot(tmp_path / "a") == snapshot(tmp_path / "b")


def test_synth_invalid_params(tmp_path):
    cfg = write_config(tmp_path, synth={"separation": 0})
    assert run("synth", "--config", cfg) == 2


@pytest.mark.slow
def test_synth_full_scale_is_fast(tmp_path):
    cfg = write_config(tmp_path, synth={"n_locations": 18_000})
    start = time.perf_counter()
    assert run("synth", "--config", cfg) == 0
    assert time.perf_counter() - start < 30


# -- label -----------------------------------------------------------------------


def test_label_three_synthetic_columns(tmp_path, capsys):
    cfg = write_config(tmp_path)
    run("synth", "--config", cfg)
    capsys.readouterr()
    assert run("label", "--config", cfg) == 0
    matrix = wio.read_label_matrix(tmp_path / "out" / "label_matrix.csv")
    assert matrix.lf_names == ("a", "b", "c")
    assert matrix.n_locations == 600
    err = capsys.readouterr().err
    assert "a: abstain rate" in err and "c: abstain rate" in err
    assert not (tmp_path / "out" / "label_matrix.csv.partial.jsonl").exists()


def _vlm_config(tmp_path, url, manifest, **endpoint):
    wio.write_manifest(manifest, tmp_path / "manifest.jsonl")
    return write_config(
        tmp_path,
        endpoints={"local": {"base_url": url, "request_timeout_s": 5, "max_retries": 0, "backoff_base_s": 0.01, **endpoint}},
        lfs=[{"name": "sq", "kind": "vlm_single_question", "endpoint": "local", "model": "m", "question": "Gully? yes or no"}],
        paths={"output_dir": "out", "manifest": "manifest.jsonl"},
    )


def test_label_dead_endpoint_exits_3(tmp_path, dead_url, manifest_factory):
    cfg = _vlm_config(tmp_path, dead_url, manifest_factory(3))
    assert run("label", "--config", cfg) == 3
    out = tmp_path / "out"
    assert not out.exists() or list(out.iterdir()) == []


def _answer_by_location(body):
    import base64

    k = base64.b64decode(body["messages"][0]["images"][0])[0]
    return "yes" if k % 2 else "no"


def test_label_resume_matches_uninterrupted_run(tmp_path, mock_ollama, manifest_factory, monkeypatch):
    manifest = manifest_factory(10)
    srv = mock_ollama(_answer_by_location)
    ref_dir = tmp_path / "ref"
    ref_dir.mkdir()
    (ref_dir / "img").symlink_to(tmp_path / "img")
    cfg_ref = _vlm_config(ref_dir, srv.url, manifest, max_in_flight=1)
    assert run("label", "--config", cfg_ref) == 0
    expected = (ref_dir / "out" / "label_matrix.csv").read_bytes()

    work = tmp_path / "work"
    work.mkdir()
    (work / "img").symlink_to(tmp_path / "img")
    cfg = _vlm_config(work, srv.url, manifest, max_in_flight=1)
    original = cli._Journal.append
    calls = {"n": 0}

    def flaky(self, *args):
        calls["n"] += 1
        if calls["n"] > 4:
            raise OSError("simulated crash")
        original(self, *args)

    monkeypatch.setattr(cli._Journal, "append", flaky)
    assert run("label", "--config", cfg) == 2
    assert not (work / "out" / "label_matrix.csv").exists()
    journal = work / "out" / "label_matrix.csv.partial.jsonl"
    journaled = len(journal.read_text().splitlines())
    assert journaled == 4

    monkeypatch.setattr(cli._Journal, "append", original)
    before = len(srv.bodies)
    assert run("label", "--config", cfg, "--resume") == 0
    assert len(srv.bodies) - before == 10 - journaled
    assert (work / "out" / "label_matrix.csv").read_bytes() == expected
    assert not journal.exists()


def test_label_without_resume_discards_journal(tmp_path, mock_ollama, manifest_factory):
    manifest = manifest_factory(3)
    srv = mock_ollama(_answer_by_location)
    cfg = _vlm_config(tmp_path, srv.url, manifest)
    out = tmp_path / "out"
    out.mkdir()
    (out / "label_matrix.csv.partial.jsonl").write_text('{"lf":"sq","location_id":"loc0","vote":1}\n')
    assert run("label", "--config", cfg) == 0
    assert len(srv.bodies) == 3
    assert wio.read_label_matrix(out / "label_matrix.csv").votes[:, 0].tolist() == [0, 1, 0]


# -- fit / infer / train / eval ----------------------------------------------------


def test_full_chain_and_outputs(tmp_path, capsys):
    out = full_chain(tmp_path)
    printed = capsys.readouterr().out
    assert "final NLL:" in printed
    assert "NPV" in printed and "Accuracy" in printed
    pl = wio.read_pseudo_labels(out / "pseudo_labels.csv")
    assert pl.location_ids == wio.read_manifest(out / "manifest.jsonl").location_ids
    assert (out / "student_loss.csv").read_text().startswith("epoch,mean_loss\n0,")
    report = json.loads((out / "metrics_student.json").read_text())
    assert set(report) == {"accuracy", "f1", "npv", "precision", "recall"}


def test_eval_sources(tmp_path):
    out = full_chain(tmp_path)
    cfg = tmp_path / "pipeline.json"
    for source in ("lf:a", "mv", "pseudo"):
        assert run("eval", "--config", cfg, "--source", source) == 0
    acc = {s: json.loads((out / f"metrics_{s}.json").read_text())["accuracy"] for s in ("lf_a", "mv", "pseudo")}
    assert acc["pseudo"] >= acc["mv"] - 0.01
    assert run("eval", "--config", cfg, "--source", "lf:zzz") == 2
    assert run("eval", "--config", cfg, "--source", "bogus") == 1


def test_eval_ground_truth_against_itself(tmp_path):
    run("synth", "--out", tmp_path / "o")
    gt = tmp_path / "o" / "ground_truth.csv"
    cfg = write_config(tmp_path, paths={"output_dir": "o"})
    assert run("eval", "--config", cfg, "--source", f"csv:{gt}", "--reference", gt) == 0
    report = json.loads((tmp_path / "o" / "metrics_csv_ground_truth.json").read_text())
    assert all(v == 1.0 for v in report.values())


def test_eval_missing_pseudo_label_row_exits_4(tmp_path):
    out = full_chain(tmp_path)
    pl = out / "pseudo_labels.csv"
    lines = pl.read_text().splitlines(keepends=True)
    pl.write_text("".join(lines[:5] + lines[6:]))
    cfg = tmp_path / "pipeline.json"
    assert run("eval", "--config", cfg, "--source", "pseudo") == 4
    assert run("train", "--config", cfg) == 4


def test_vote_writes_scheme_file(tmp_path):
    ann = tmp_path / "ann.jsonl"
    rows = [
        {"location_id": "x", "labeler_id": "l1", "scores": [1, 0, 0]},
        {"location_id": "y", "labeler_id": "l1", "scores": [4, 4, 0]},
        {"location_id": "z", "labeler_id": "l1", "scores": [0, 0, 0]},
    ]
    ann.write_text("".join(json.dumps(r) + "\n" for r in rows))
    cfg = write_config(tmp_path, paths={"output_dir": "out", "annotations": "ann.jsonl"})
    assert run("vote", "--config", cfg) == 0
    assert (tmp_path / "out" / "ground_truth_strict-negative.csv").read_text() == "location_id,label\nx,1\ny,1\nz,0\n"
    assert run("vote", "--config", cfg, "--scheme", "lenient-negative") == 0
    assert (tmp_path / "out" / "ground_truth_lenient-negative.csv").read_text() == "location_id,label\nx,0\ny,1\nz,0\n"


def test_vote_missing_location_is_misalignment(tmp_path, manifest_factory):
    wio.write_manifest(manifest_factory(2, n_images=3), tmp_path / "m.jsonl")
    (tmp_path / "ann.jsonl").write_text('{"location_id":"loc0","labeler_id":"l","scores":[0,0,0]}\n')
    cfg = write_config(tmp_path, paths={"output_dir": "out", "annotations": "ann.jsonl", "manifest": "m.jsonl"})
    assert run("vote", "--config", cfg) == 4


# -- config and usage ----------------------------------------------------------------


def test_unknown_config_key_exits_2(tmp_path):
    cfg = write_config(tmp_path, student={"epochz": 3})
    assert run("train", "--config", cfg) == 2
    with pytest.raises(ConfigError, match="epochz"):
        load_config(cfg)


def test_config_rejects_bad_values(tmp_path):
    with pytest.raises(ConfigError):
        parse_config({"lfs": [{"name": "x", "kind": "vlm_single_question", "endpoint": "nope", "model": "m", "question": "q"}]})
    with pytest.raises(ConfigError):
        parse_config({"lfs": [{"name": "x", "kind": "mystery"}]})
    with pytest.raises(ConfigError):
        parse_config({"eval": {"threshold": 1.5}})
    with pytest.raises(ConfigError):
        parse_config({"label_model": {"correlations": [[1, 0]]}})


def test_multi_question_config_reads_files(tmp_path):
    (tmp_path / "q.txt").write_text("first?\n\nsecond?\n")
    (tmp_path / "p.txt").write_text("Decide.\n")
    cfg = parse_config(
        {
            "endpoints": {"e": {"base_url": "http://localhost:11434"}},
            "lfs": [
                {
                    "name": "mq",
                    "kind": "vlm_multi_question",
                    "endpoint": "e",
                    "vlm_model": "v",
                    "llm_model": "l",
                    "questions_file": "q.txt",
                    "aggregation_prompt_file": "p.txt",
                }
            ],
        },
        tmp_path,
    )
    assert cfg.lfs[0].kind.questions == ("first?", "second?")
    assert cfg.lfs[0].kind.aggregation_prompt == "Decide.\n"


def test_usage_errors_exit_1(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 1
    assert run("fit") == 1


def test_missing_input_exits_2(tmp_path):
    cfg = write_config(tmp_path)
    assert run("fit", "--config", cfg) == 2


def test_holdout_split_train_and_eval(tmp_path):
    cfg = write_config(tmp_path, student={"epochs": 20, "holdout_fraction": 0.25})
    run("synth", "--config", cfg)
    for stage in ("label", "fit", "infer", "train"):
        assert run(stage, "--config", cfg) == 0
    out = tmp_path / "out"
    for source in ("student", "lf:a", "mv"):
        assert run("eval", "--config", cfg, "--source", source, "--split", "holdout") == 0
    held = {s: json.loads((out / f"metrics_{s}_holdout.json").read_text())["accuracy"] for s in ("student", "lf_a", "mv")}
    assert held["student"] > max(held["lf_a"], held["mv"])
    assert run("eval", "--config", cfg, "--source", "student", "--split", "train") == 0
    assert (out / "metrics_student_train.json").exists()


def test_holdout_fraction_validation(tmp_path):
    cfg = write_config(tmp_path, student={"holdout_fraction": 1.0})
    assert run("train", "--config", cfg) == 2
