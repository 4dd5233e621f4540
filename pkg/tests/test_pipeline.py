import json
import subprocess
import sys

import httpx
import pytest

from listexpand.cli import main
from listexpand.errors import ConfigError, StageError
from listexpand.pipeline import (
    DecoderSettings,
    RunConfig,
    RunPaths,
    SamplerSettings,
    run_ablation,
    run_expand,
)
from listexpand.ranker import RankerConfig, TranscriptStore

from conftest import toy_dataset


def toy_config(tmp_path, run_name="run", **overrides):
    vocab_path, queries_path, _ = toy_dataset(tmp_path)
    defaults = dict(
        vocab_path=str(vocab_path),
        queries_path=str(queries_path),
        out_dir=str(tmp_path / "runs"),
        run_dir=str(tmp_path / "runs" / run_name),
        decoder=DecoderSettings(width=40, num_candidates=15),
        sampler=SamplerSettings(list_size=5, occurrences=4, seed=7),
        ranker=RankerConfig(kind="perfect-oracle"),
        max_in_flight=2,
    )
    defaults.update(overrides)
    return RunConfig(**defaults)


def test_run_expand_happy_path(tmp_path):
    config = toy_config(tmp_path)
    manifest = run_expand(config)
    paths = RunPaths(manifest.run_dir)
    for path in (paths.candidates, paths.plan, paths.transcripts,
                 paths.result, paths.metrics, paths.manifest):
        assert path.exists(), path
    assert manifest.counts["degraded"] == 0
    assert manifest.counts["queries"] == 2
    assert manifest.metrics_summary is not None
    # perfect oracle pushes the whole class to the top
    assert manifest.metrics_summary["map"]["10"] == pytest.approx(1.0)


def test_rerun_reuses_transcripts_and_reproduces_bytes(tmp_path):
    config = toy_config(tmp_path)
    first = run_expand(config)
    paths = RunPaths(first.run_dir)
    result_bytes = paths.result.read_bytes()
    metrics_bytes = paths.metrics.read_bytes()
    paths.result.unlink()
    paths.metrics.unlink()
    second = run_expand(config)
    assert second.counts["ranked_new"] == 0
    assert second.counts["reused"] == first.counts["lists"]
    assert paths.result.read_bytes() == result_bytes
    assert paths.metrics.read_bytes() == metrics_bytes


def test_interrupted_ranking_resumes_without_duplicates(tmp_path):
    config = toy_config(tmp_path)
    manifest = run_expand(config)
    paths = RunPaths(manifest.run_dir)
    lines = paths.transcripts.read_text(encoding="utf-8").splitlines()
    keep = len(lines) // 2
    paths.transcripts.write_text("\n".join(lines[:keep]) + "\n",
                                 encoding="utf-8")
    paths.result.unlink()
    second = run_expand(config)
    assert second.counts["reused"] == keep
    assert second.counts["ranked_new"] == manifest.counts["lists"] - keep
    records = TranscriptStore(paths.transcripts).load()
    assert len(records) == manifest.counts["lists"]


def test_plan_drift_is_refused(tmp_path):
    config = toy_config(tmp_path)
    run_expand(config)
    drifted = toy_config(tmp_path, sampler=SamplerSettings(
        list_size=5, occurrences=4, seed=999))
    with pytest.raises(StageError, match="plan"):
        run_expand(drifted)


def test_remote_ranker_end_to_end(tmp_path):
    def handler(request):
        body = json.loads(request.content)
        parts = body["messages"][0]["content"]
        text = "\n".join(p["text"] for p in parts if p["type"] == "text")
        # echo the candidate lines back in reverse order
        names = [line[2:] for line in text.splitlines() if line.startswith("- ")]
        candidates = names[-5:]
        return httpx.Response(200, json={
            "choices": [{"message": {"content": " > ".join(reversed(candidates))}}]
        })

    config = toy_config(
        tmp_path, run_name="remote",
        ranker=RankerConfig(kind="remote-chat", model="mock", max_attempts=1),
    )
    client = httpx.Client(transport=httpx.MockTransport(handler))
    manifest = run_expand(config, client=client)
    assert manifest.counts["degraded"] == 0
    assert manifest.counts["ranked_new"] == manifest.counts["lists"]
    records = TranscriptStore(RunPaths(manifest.run_dir).transcripts).load()
    some = next(iter(records.values()))
    assert some["request"]["model"] == "mock"
    assert " > " in some["response"]


def test_unreachable_endpoint_degrades_every_list(tmp_path):
    def handler(request):
        raise httpx.ConnectError("connection refused")

    config = toy_config(
        tmp_path, run_name="down",
        ranker=RankerConfig(kind="remote-chat", model="m", max_attempts=2),
    )
    client = httpx.Client(transport=httpx.MockTransport(handler))
    manifest = run_expand(config, client=client, sleep=lambda _: None)
    assert manifest.counts["degraded"] == manifest.counts["lists"]
    assert manifest.degraded_fraction == 1.0
    # fallback keeps presentation order, so results still exist
    assert RunPaths(manifest.run_dir).result.exists()


def test_strict_mode_excludes_degraded_lists(tmp_path):
    def handler(request):
        raise httpx.ConnectError("refused")

    config = toy_config(
        tmp_path, run_name="strict", strict_degraded=True,
        ranker=RankerConfig(kind="remote-chat", model="m", max_attempts=1),
    )
    client = httpx.Client(transport=httpx.MockTransport(handler))
    manifest = run_expand(config, client=client, sleep=lambda _: None)
    result = json.loads(
        RunPaths(manifest.run_dir).result.read_text(encoding="utf-8"))
    for query_doc in result["queries"]:
        for row in query_doc["ranking"]:
            assert row["flagged"] is True
            assert row["scored_occurrences"] == 0


def test_config_round_trip():
    config = toy_config_dictless()
    data = config.to_dict()
    assert RunConfig.from_dict(data) == config
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"mystery": 1})


def toy_config_dictless():
    return RunConfig(
        vocab_path="v", queries_path="q", out_dir="o",
        decoder=DecoderSettings(width=2, num_candidates=3),
        sampler=SamplerSettings(list_size=3, occurrences=2, seed="s"),
        ranker=RankerConfig(kind="noisy-oracle", swap_rate=0.25, seed=4),
        cutoffs=(5, 10),
    )


def test_run_ablation_grid(tmp_path):
    config = toy_config(tmp_path, run_name="ablate",
                        ranker=RankerConfig(kind="noisy-oracle", swap_rate=0.2,
                                            seed=3))
    report = run_ablation(config, list_sizes=[4, 5], occurrence_values=[2, 3])
    assert len(report["cells"]) == 4
    for cell in report["cells"]:
        assert "error" not in cell, cell
        assert cell["mean_kendall_tau"] is not None
    # 15 candidates, n=4: o*N=30/45 are not divisible by 4 in every cell
    padded_cells = [c for c in report["cells"] if c["padded_queries"]]
    assert padded_cells, "expected at least one padded cell"
    assert (tmp_path / "runs" / "ablate" / "ablation.json").exists()


def test_ablation_shows_occurrence_trend_on_ordered_class(tmp_path):
    # single 60-entity class with a strict ground-truth order: recovering
    # it from noisy rankings should improve with more occurrences
    records = [{"id": f"c{i:02d}", "surface": f"Class Item {i:02d}"}
               for i in range(60)]
    truth = [f"c{i:02d}" for i in range(60)]
    (tmp_path / "vocab.jsonl").write_text(
        "\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")
    (tmp_path / "queries.jsonl").write_text(
        json.dumps({"query_id": "q", "seeds": truth[:3],
                    "ground_truth": truth}) + "\n", encoding="utf-8")
    config = RunConfig(
        vocab_path=str(tmp_path / "vocab.jsonl"),
        queries_path=str(tmp_path / "queries.jsonl"),
        out_dir=str(tmp_path / "runs"),
        run_dir=str(tmp_path / "runs" / "trend"),
        decoder=DecoderSettings(width=80, num_candidates=60),
        sampler=SamplerSettings(seed=5),
        ranker=RankerConfig(kind="noisy-oracle", swap_rate=0.2, seed=9),
    )
    report = run_ablation(config, list_sizes=[5], occurrence_values=[2, 10])
    tau_by_o = {cell["occurrences"]: cell["mean_kendall_tau"]
                for cell in report["cells"]}
    assert tau_by_o[10] > tau_by_o[2]


def test_inference_mode_without_ground_truth(tmp_path):
    def handler(request):
        return httpx.Response(200, json={
            "choices": [{"message": {"content": "whatever order"}}]
        })

    config = toy_config(
        tmp_path, run_name="infer",
        ranker=RankerConfig(kind="remote-chat", model="m", max_attempts=1),
    )
    truth = [f"blue{i}" for i in range(10)]
    bare = [
        {"query_id": "q3", "seeds": truth[:3]},
        {"query_id": "q5", "seeds": truth[:5]},
    ]
    (tmp_path / "queries.jsonl").write_text(
        "\n".join(json.dumps(q) for q in bare) + "\n", encoding="utf-8")
    client = httpx.Client(transport=httpx.MockTransport(handler))
    manifest = run_expand(config, client=client)
    paths = RunPaths(manifest.run_dir)
    assert paths.result.exists()
    assert not paths.metrics.exists()
    assert manifest.metrics_summary is None


def test_oracle_ranker_requires_ground_truth(tmp_path):
    config = toy_config(tmp_path, run_name="no-truth")
    (tmp_path / "queries.jsonl").write_text(
        json.dumps({"query_id": "q3",
                    "seeds": ["blue0", "blue1", "blue2"]}) + "\n",
        encoding="utf-8")
    with pytest.raises(ConfigError, match="ground truth"):
        run_expand(config)


def test_ablation_records_cell_failures_and_continues(tmp_path):
    config = toy_config(tmp_path, run_name="ablate-fail",
                        ranker=RankerConfig(kind="perfect-oracle"))
    # list size 20 exceeds the 15 decoded candidates and must fail
    report = run_ablation(config, list_sizes=[20, 5], occurrence_values=[2])
    by_n = {cell["list_size"]: cell for cell in report["cells"]}
    assert "error" in by_n[20]
    assert "error" not in by_n[5]


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def cli(args):
    return main([str(a) for a in args])


def test_cli_expand_and_stagewise_agree(tmp_path, capsys):
    vocab_path, queries_path, _ = toy_dataset(tmp_path)
    common = ["--vocab", vocab_path, "--queries", queries_path,
              "--width", 40, "--num-candidates", 15,
              "--occurrences", 4, "--plan-seed", 7, "--ranker", "perfect-oracle"]
    one_shot = tmp_path / "one"
    staged = tmp_path / "staged"
    assert cli(["expand", *common, "--run-dir", one_shot]) == 0
    for verb in ("decode", "plan", "rank", "score", "eval"):
        assert cli([verb, *common, "--run-dir", staged]) == 0, verb
    assert (one_shot / "result.json").read_bytes() == \
        (staged / "result.json").read_bytes()
    assert (one_shot / "metrics.json").read_bytes() == \
        (staged / "metrics.json").read_bytes()
    out = capsys.readouterr().out
    assert "MAP@10" in out


def test_cli_set_overrides(tmp_path):
    vocab_path, queries_path, _ = toy_dataset(tmp_path)
    run_dir = tmp_path / "r"
    code = cli(["expand", "--vocab", vocab_path, "--queries", queries_path,
                "--run-dir", run_dir, "--width", 40, "--num-candidates", 15,
                "--set", "sampler.occurrences=3", "--set", "sampler.seed=11"])
    assert code == 0
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["config"]["sampler"]["occurrences"] == 3
    assert manifest["config"]["sampler"]["seed"] == 11


def test_cli_config_file(tmp_path):
    vocab_path, queries_path, _ = toy_dataset(tmp_path)
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({
        "vocab_path": str(vocab_path),
        "queries_path": str(queries_path),
        "run_dir": str(tmp_path / "from-file"),
        "decoder": {"width": 40, "num_candidates": 15},
        "sampler": {"occurrences": 2},
    }), encoding="utf-8")
    assert cli(["expand", "--config", config_path]) == 0
    assert (tmp_path / "from-file" / "result.json").exists()


def test_cli_bad_flag_is_config_error(tmp_path):
    vocab_path, queries_path, _ = toy_dataset(tmp_path)
    code = cli(["expand", "--vocab", vocab_path, "--queries", queries_path,
                "--list-size", 1])
    assert code == 2


def test_cli_missing_vocab_is_data_error(tmp_path):
    _, queries_path, _ = toy_dataset(tmp_path)
    code = cli(["expand", "--vocab", tmp_path / "nope.jsonl",
                "--queries", queries_path, "--run-dir", tmp_path / "r"])
    assert code == 3


def test_cli_degradation_threshold_exit_code(tmp_path):
    vocab_path, queries_path, _ = toy_dataset(tmp_path)
    code = cli(["expand", "--vocab", vocab_path, "--queries", queries_path,
                "--run-dir", tmp_path / "r",
                "--width", 40, "--num-candidates", 15,
                "--ranker", "remote-chat", "--model", "m",
                "--base-url", "http://127.0.0.1:9",
                "--max-attempts", 1, "--timeout", 0.2,
                "--degraded-threshold", 0.5])
    assert code == 4


def test_cli_stage_verbs_require_run_dir(tmp_path):
    vocab_path, queries_path, _ = toy_dataset(tmp_path)
    code = cli(["decode", "--vocab", vocab_path, "--queries", queries_path])
    assert code == 2


def test_console_script_is_wired():
    completed = subprocess.run(
        [sys.executable, "-m", "listexpand.cli", "--help"],
        capture_output=True, text=True,
    )
    assert completed.returncode == 0
    assert "expand" in completed.stdout
