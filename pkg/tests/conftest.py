import hashlib
from pathlib import Path

import pytest
import yaml

from artefact_lab.cli import main

COIN_STAGES = ("preprocess", "detect", "match", "dist", "impute", "cluster", "eval")
CLUSTER_STAGES = ("preprocess", "detect", "embed", "kmeans", "eval")
RECONSTRUCT_STAGES = ("contours", "sherd-match", "eval")


def write_config(path: Path, cfg: dict) -> Path:
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


def run_cli(stage, config, corpus, work, capsys=None, seed=None):
    """Run one stage in-process; return (exit code, stdout)."""
    argv = [stage, "--config", str(config), "--in", str(corpus), "--out", str(work)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    code = main(argv)
    out = capsys.readouterr().out if capsys is not None else ""
    return code, out


def run_pipeline(config, corpus, work, stages, capsys=None):
    """synth into ``corpus`` then every stage into ``work``; return the last stdout."""
    out = ""
    assert run_cli("synth", config, corpus, corpus, capsys)[0] == 0
    for st in stages:
        code, out = run_cli(st, config, corpus, work, capsys)
        assert code == 0, f"stage {st} exited {code}"
    return out


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(Path(root).rglob("*")) if p.is_file()}


@pytest.fixture
def tiny_coin_config(tmp_path):
    return write_config(tmp_path / "tiny.yaml", {
        "pipeline": "coins", "seed": 3,
        "synth": {"kind": "coins", "n_dies": 2, "coins_per_die": 3},
        "preprocess": {"tv_iterations": 20},
        "cluster": {"iterations": 300, "burn_in": 100, "thin": 2, "baseline_k": 2},
    })


# one summary line per acceptance criterion, printed after the run
CRITERIA: dict = {}


def record(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
