import hashlib
import json
import os
import shutil
from pathlib import Path

import pytest
import torch

torch.set_num_threads(1)

ROOT = Path(__file__).resolve().parents[1]
ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        name, ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def trained_run():
    """A full default-config run (corpus, autoencoder, stages 0-3, ablation
    suite), built through the CLI once and reused while neither the config
    nor the package source changes.

    Location: $LONGROLL_ACCEPTANCE_DIR, else <repo>/.acceptance.
    """
    from longroll import cli, config

    base = Path(os.environ.get("LONGROLL_ACCEPTANCE_DIR", ROOT / ".acceptance"))
    data, run, evald = base / "data", base / "run", base / "eval"
    stamp, key_file = base / "complete.json", base / "key.json"
    src = hashlib.sha256()
    for path in sorted((ROOT / "src" / "longroll").glob("*.py")):
        src.update(path.name.encode() + path.read_bytes())
    want = {"config_hash": config.config_hash(config.load()), "source": src.hexdigest()[:16]}
    if stamp.exists() and json.loads(stamp.read_text()) == want:
        return base
    if key_file.exists() and json.loads(key_file.read_text()) != want:
        shutil.rmtree(base)
    base.mkdir(parents=True, exist_ok=True)
    key_file.write_text(json.dumps(want))
    steps = []
    if not (data / "manifest.json").exists():
        steps.append(["gen-data", "--out", str(data)])
    if not (run / "ae.ckpt").exists():
        steps.append(["train-ae", "--data", str(data), "--out", str(run)])
    for k in range(4):
        if not (run / f"stage{k}.ckpt").exists():
            steps.append(["train", "--stage", str(k), "--data", str(data), "--out", str(run), "--resume"])
    steps.append(["ablate", "--run", str(run), "--out", str(evald)])
    for argv in steps:
        code = cli.main(argv + ["-q"])
        assert code == 0, f"longroll {' '.join(argv)} exited {code}"
    stamp.write_text(json.dumps(want))
    return base
