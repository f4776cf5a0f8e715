"""Train the reduced model on the synthetic corpus and score copy-synthesis on the training clips.

    python experiments/overfit/run_overfit.py            # full run (resumes from run/last.ckpt)
    python experiments/overfit/run_overfit.py --eval-only
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

from bandflow.flow import SamplerConfig
from bandflow.pipeline.checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from bandflow.pipeline.data import DatasetManifest, make_synthetic_corpus
from bandflow.pipeline.metrics import evaluate, write_report
from bandflow.pipeline.training import Trainer, TrainingConfig

HERE = Path(__file__).resolve().parent
MODEL_PATH = HERE / "overfit_model.ckpt"


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--eval-only", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = TrainingConfig.from_file(HERE / "config.txt")
    if not Path(cfg.manifest).exists():
        make_synthetic_corpus(HERE / "data", n_clips=10, seconds=3.0, sample_rate=cfg.sample_rate, seed=0)
    manifest = DatasetManifest.load(cfg.manifest)

    if not args.eval_only:
        last = Path(cfg.output_dir) / "last.ckpt"
        resume = load_checkpoint(last) if last.exists() else None
        trainer = Trainer(cfg, manifest, resume)
        started = time.time()
        trainer.run()
        logging.info("training finished in %.0f s", time.time() - started)
        # Inference-only export: model, statistics and cached grid, no optimiser state.
        save_checkpoint(CheckpointBundle(trainer.model, trainer.step, {"seed": cfg.seed},
                                         {"config": cfg.to_text()}), MODEL_PATH)

    model = load_checkpoint(MODEL_PATH).model.eval()
    results = {}
    for grid in ("uniform", "equal_straightness"):
        rows, aggregate = evaluate(model, manifest, SamplerConfig(10, grid), seed=0, split="train")
        write_report(rows, aggregate, HERE / "results" / f"copy_synthesis_{grid}.txt")
        results[grid] = aggregate
    (HERE / "results" / "summary.json").write_text(json.dumps(results, indent=2) + "\n")
    print(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
