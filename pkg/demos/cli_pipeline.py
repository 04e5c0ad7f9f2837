"""
Running the pipeline from the command line
==========================================

Builds a tiny synthetic corpus and config, then drives every stage through
``morphmad.cli.main``. The same calls work from a shell as
``morphmad <stage> --config config.json --run-dir run``.
"""

# %%
import json
import tempfile
from pathlib import Path

from morphmad import cli
from morphmad.synthetic import make_face_corpus

work = Path(tempfile.mkdtemp(prefix="cli_demo_"))
corpus = make_face_corpus(work / "corpus", n_identities=20, images_per_identity=2, size=256, seed=7, non_frontal=2)
config = {
    "corpus": corpus,
    "seed": 7,
    "pairing": {"num_keys": 6, "pairs_per_key": 2},
    "pwmad": {"input_size": 64, "block_config": [2, 2], "growth_rate": 8, "num_init_features": 16, "bn_size": 2},
    "train": {"learning_rate": 1e-3, "batch_size": 8, "max_epochs": 10, "patience": 5},
}
(work / "config.json").write_text(json.dumps(config, indent=1))
run_dir = work / "run"

# %%
for stage in ["filter", "pair", "morph", "redigitize", "split", "train", "eval", "vuln", "report", "plot"]:
    code = cli.main([stage, "--config", str(work / "config.json"), "--run-dir", str(run_dir)])
    print(f"{stage:<11} exit {code}")

# %%
print(sorted(str(p.relative_to(run_dir)) for p in run_dir.rglob("*") if p.is_file() and "stages" not in p.parts)[:20])
