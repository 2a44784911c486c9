"""Command-line interface: subcommand wiring, exit codes, artifact layout,
and the seed environment fallback."""

import json
import os

import pytest

from covlm import grammar as G
from covlm.cli import main
from covlm.scenes import render_scene, write_ppm

TINY_MODEL = {"d_model": 32, "n_layers": 2, "n_heads": 2, "d_ffn": 64,
              "max_len": 160}


def run(capsys, *argv):
    code = main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    code = main(["gen-data", "--out", str(out), "--n", "16", "--eval-n", "6",
                 "--holdout-n", "5", "--seed", "3"])
    assert code == 0
    return str(out)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("cli") / "run"
    cfg = tmp_path_factory.mktemp("cli") / "cfg.json"
    cfg.write_text(json.dumps(TINY_MODEL))
    code = main(["train", "--config", str(cfg),
                 "--train-data", os.path.join(data_dir, "corpus.jsonl"),
                 "--out-dir", str(out), "--steps", "4", "--batch-size", "4",
                 "--eval-every", "2", "--seed", "7", "--quiet"])
    assert code == 0
    return str(out)


@pytest.fixture(scope="module")
def ckpt(run_dir):
    return os.path.join(run_dir, "ckpt-000004.bin")


# -- gen-data -------------------------------------------------------------------

def test_gen_data_artifacts(data_dir, capsys):
    for name in ("corpus.jsonl", "scenes.jsonl", "eval_scenes.jsonl",
                 "holdout.json", "stats.json"):
        assert os.path.exists(os.path.join(data_dir, name)), name
    with open(os.path.join(data_dir, "holdout.json")) as fh:
        holdout = {tuple(t) for t in json.load(fh)}
    assert len(holdout) == 5
    with open(os.path.join(data_dir, "scenes.jsonl")) as fh:
        train_scenes = [json.loads(l) for l in fh]
    with open(os.path.join(data_dir, "eval_scenes.jsonl")) as fh:
        eval_scenes = [json.loads(l) for l in fh]
    assert len(train_scenes) == 16 and len(eval_scenes) == 6
    # held-out combinations never appear in training scenes, always in eval ones
    assert all(tuple(sc["tuple"]) not in holdout for sc in train_scenes)
    assert all(tuple(sc["tuple"]) in holdout for sc in eval_scenes)
    with open(os.path.join(data_dir, "stats.json")) as fh:
        stats = json.load(fh)
    assert stats["records"] == 16 and stats["holdout_size"] == 5


def test_gen_data_corpus_lines_are_valid(data_dir):
    with open(os.path.join(data_dir, "corpus.jsonl")) as fh:
        records = [json.loads(l) for l in fh]
    assert len(records) == 16
    for rec in records:
        G.validate(G.from_text(rec["comm_text"]))
        assert set(rec) >= {"id", "image", "caption", "comm_text", "spans"}


def test_gen_data_seed_env_fallback(tmp_path, capsys, monkeypatch):
    def corpus_bytes(out, extra_env):
        for key, val in extra_env.items():
            monkeypatch.setenv(key, val)
        code, _, _ = run(capsys, "gen-data", "--out", str(out), "--n", "4",
                         "--eval-n", "2", "--holdout-n", "3")
        assert code == 0
        with open(out / "corpus.jsonl", "rb") as fh:
            return fh.read()

    a = corpus_bytes(tmp_path / "a", {"COVLM_SEED": "5"})
    b = corpus_bytes(tmp_path / "b", {"COVLM_SEED": "5"})
    c = corpus_bytes(tmp_path / "c", {"COVLM_SEED": "6"})
    assert a == b
    assert a != c


# -- ground ----------------------------------------------------------------------

def test_ground_subcommand(data_dir, tmp_path, capsys):
    out = tmp_path / "reground.jsonl"
    code, stdout, _ = run(capsys, "ground",
                          "--scenes", os.path.join(data_dir, "scenes.jsonl"),
                          "--out", str(out), "--seed", "0")
    assert code == 0
    assert json.loads(stdout)["skipped"] == 0
    with open(out) as fh:
        records = [json.loads(l) for l in fh]
    assert len(records) == 16
    for rec in records:
        assert rec["spans"], "plain grounding emits spans for every record"


# -- train ------------------------------------------------------------------------

def test_train_reports_final_checkpoint(run_dir, capsys):
    assert os.path.exists(os.path.join(run_dir, "ckpt-000004.bin"))
    assert os.path.exists(os.path.join(run_dir, "train_log.jsonl"))


def test_train_rejects_unknown_config_key(tmp_path, data_dir, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus_knob": 1}))
    code, _, err = run(capsys, "train", "--config", str(cfg),
                       "--train-data", os.path.join(data_dir, "corpus.jsonl"),
                       "--out-dir", str(tmp_path / "run"), "--steps", "1")
    assert code == 2
    assert "bogus_knob" in err


def test_train_rejects_invalid_values(tmp_path, data_dir, capsys):
    code, _, err = run(capsys, "train",
                       "--train-data", os.path.join(data_dir, "corpus.jsonl"),
                       "--out-dir", str(tmp_path / "run"), "--steps", "0")
    assert code == 2
    assert "invalid config" in err


def test_unknown_flag_is_usage_error(capsys):
    assert main(["gen-data", "--frobnicate"]) == 2
    capsys.readouterr()


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["make-coffee"]) == 2
    capsys.readouterr()


# -- decode ------------------------------------------------------------------------

def test_decode_from_scene_index(ckpt, data_dir, capsys):
    code, stdout, _ = run(capsys, "decode", "--ckpt", ckpt,
                          "--scenes", os.path.join(data_dir, "eval_scenes.jsonl"),
                          "--index", "0", "--prompt",
                          "<obj> the red square </obj> <visual>",
                          "--max-tokens", "6", "--seed", "0")
    assert code == 0
    out = json.loads(stdout)
    assert out["text"].startswith("<obj> the red square </obj> <visual> <box>")
    G.validate(G.from_text(out["text"]))
    assert out["boxes"], "the forced look emits at least one box"
    for box, score in out["boxes"].values():
        assert len(box) == 4 and 0.0 <= score <= 1.0


def test_decode_from_ppm_file(ckpt, data_dir, tmp_path, capsys):
    with open(os.path.join(data_dir, "eval_scenes.jsonl")) as fh:
        scene = json.loads(fh.readline())
    img = tmp_path / "scene.ppm"
    write_ppm(str(img), render_scene(scene))
    code, stdout, _ = run(capsys, "decode", "--ckpt", ckpt, "--image", str(img),
                          "--max-tokens", "4", "--seed", "1")
    assert code == 0
    assert "text" in json.loads(stdout)


def test_decode_rejects_roi_prompt(ckpt, data_dir, capsys):
    code, _, err = run(capsys, "decode", "--ckpt", ckpt,
                       "--scenes", os.path.join(data_dir, "eval_scenes.jsonl"),
                       "--prompt", "<previsual> <prebox> [roi:0]")
    assert code == 2
    assert "roi" in err


def test_decode_index_out_of_range(ckpt, data_dir, capsys):
    code, _, err = run(capsys, "decode", "--ckpt", ckpt,
                       "--scenes", os.path.join(data_dir, "eval_scenes.jsonl"),
                       "--index", "99")
    assert code == 2


# -- eval --------------------------------------------------------------------------

@pytest.mark.parametrize("task", ["aro", "cola", "refexp", "vqa"])
def test_eval_tasks_run_and_audit(ckpt, data_dir, tmp_path, capsys, task):
    report_path = tmp_path / f"{task}.json"
    code, stdout, _ = run(capsys, "eval", "--ckpt", ckpt,
                          "--data", os.path.join(data_dir, "eval_scenes.jsonl"),
                          "--task", task, "--report", str(report_path),
                          "--seed", "0")
    assert code == 0
    summary = json.loads(stdout)
    assert summary["task"] == task and summary["items"] > 0
    with open(report_path) as fh:
        report = json.load(fh)
    assert report["metrics"] == summary["metrics"]
    assert len(report["items"]) == summary["items"]


def test_eval_hoi_with_train_counts(ckpt, data_dir, capsys):
    code, stdout, _ = run(capsys, "eval", "--ckpt", ckpt,
                          "--data", os.path.join(data_dir, "eval_scenes.jsonl"),
                          "--task", "hoi",
                          "--train-corpus", os.path.join(data_dir, "corpus.jsonl"),
                          "--seed", "0")
    assert code == 0
    assert "map_full" in json.loads(stdout)["metrics"]


def test_eval_vqa_with_holdout(ckpt, data_dir, capsys):
    code, stdout, _ = run(capsys, "eval", "--ckpt", ckpt,
                          "--data", os.path.join(data_dir, "eval_scenes.jsonl"),
                          "--task", "vqa",
                          "--holdout", os.path.join(data_dir, "holdout.json"),
                          "--seed", "0")
    assert code == 0
    assert "acc" in json.loads(stdout)["metrics"]


def test_eval_missing_checkpoint_is_runtime_error(data_dir, tmp_path, capsys):
    missing = str(tmp_path / "nope.bin")
    code, _, err = run(capsys, "eval", "--ckpt", missing,
                       "--data", os.path.join(data_dir, "eval_scenes.jsonl"),
                       "--task", "aro")
    assert code == 1
    payload = json.loads(err)
    assert payload["error"] == "FileNotFoundError"
    assert missing in payload["message"]


# -- inspect-ckpt -------------------------------------------------------------------

def test_inspect_ckpt(ckpt, capsys):
    code, stdout, _ = run(capsys, "inspect-ckpt", "--ckpt", ckpt)
    assert code == 0
    info = json.loads(stdout)
    assert info["meta"]["step"] == 4
    assert info["meta"]["config"]["d_model"] == TINY_MODEL["d_model"]
    assert info["arrays"] > 0 and info["total_values"] > 0
    assert all(set(e) == {"name", "shape"} for e in info["largest"])


def test_console_entry_point_installed():
    import importlib.metadata as md
    eps = md.entry_points()
    scripts = eps.select(group="console_scripts", name="covlm")
    assert any(ep.value == "covlm.cli:main" for ep in scripts)
