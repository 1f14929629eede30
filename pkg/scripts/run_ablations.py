#!/usr/bin/env python3
"""
TriDomain - Ablation Suite Driver
Runs generate -> summarize -> train -> embed -> evaluate for every ablation
axis on one synthetic dataset and prints an mR1 comparison table
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import orjson
import pandas as pd

# Add parent directory to path to import app modules
sys.path.insert(0, str(Path(__file__).parent.parent))

from app.modules.evaluation import evaluate_all, save_report  # noqa: E402
from app.modules.fusion import count_parameters, embed_dataset  # noqa: E402
from app.modules.summarization import summarize_dataset  # noqa: E402
from app.modules.synthgen import generate_dataset  # noqa: E402
from app.modules.training import train  # noqa: E402
from app.schemas import (  # noqa: E402
    DomainId,
    FusionVariant,
    Modality,
    SharingMode,
    SummarizerKind,
    SynthConfig,
    TrainingConfig,
)
from app.services.tensor_io import load_dataset  # noqa: E402

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


# =============================================================================
# Ablation Grid
# =============================================================================

TEXT_INPUTS = [
    SummarizerKind.RAW_PASSTHROUGH,
    SummarizerKind.KEYWORD_BASELINE,
    SummarizerKind.NAME_ONLY,
    SummarizerKind.FEATURES_ONLY,
    SummarizerKind.LLM_MOCK,
]

SUITES = ("text", "fusion", "sharing", "exclusion")


def ablation_runs(suites: List[str]) -> List[Dict]:
    """
    One entry per run: suite, label, summarizer kind (None = no text) and
    the ModelConfig / TrainingConfig overrides
    """
    runs: List[Dict] = []
    if "text" in suites:
        runs.append({"suite": "text", "label": "visual only", "kind": None,
                     "model": {"modality": Modality.VISUAL}, "training": {}})
        for kind in TEXT_INPUTS:
            for modality in (Modality.MULTIMODAL, Modality.TEXT):
                runs.append({"suite": "text", "label": f"{kind.value} / {modality.value}", "kind": kind,
                             "model": {"modality": modality}, "training": {}})
    if "fusion" in suites:
        for variant in FusionVariant:
            runs.append({"suite": "fusion", "label": variant.value, "kind": SummarizerKind.LLM_MOCK,
                         "model": {"fusion_variant": variant}, "training": {}})
    if "sharing" in suites:
        for sharing in SharingMode:
            runs.append({"suite": "sharing", "label": sharing.value, "kind": SummarizerKind.LLM_MOCK,
                         "model": {"sharing": sharing}, "training": {}})
    if "exclusion" in suites:
        runs.append({"suite": "exclusion", "label": "none", "kind": SummarizerKind.LLM_MOCK,
                     "model": {}, "training": {}})
        for domain in DomainId.ordered():
            runs.append({"suite": "exclusion", "label": f"w/o {domain.value}", "kind": SummarizerKind.LLM_MOCK,
                         "model": {}, "training": {"excluded_domains": [domain]}})
    return runs


# =============================================================================
# Runner
# =============================================================================

def run_suite(synth_config: SynthConfig, base_config: TrainingConfig, out_dir: Path,
              suites: List[str], epochs: Optional[int] = None) -> pd.DataFrame:
    """Run every selected ablation on one generated dataset"""
    paths = generate_dataset(synth_config, out_dir / "data")
    train_set = load_dataset(paths["train"])
    test_set = load_dataset(paths["test"])

    summary_cache: Dict[SummarizerKind, tuple] = {}

    def summaries_for(kind: SummarizerKind):
        if kind not in summary_cache:
            logger.info(f"Summarizing with {kind.value}")
            summary_cache[kind] = tuple(
                {r.instance_id: r for r in summarize_dataset(split, kind)} for split in (train_set, test_set)
            )
        return summary_cache[kind]

    rows = []
    for index, run_spec in enumerate(ablation_runs(suites)):
        model_config = base_config.model.model_copy(update=run_spec["model"])
        updates = {"model": model_config, **run_spec["training"]}
        if epochs is not None:
            updates["epochs"] = epochs
        config = base_config.model_copy(update=updates)
        train_summaries, test_summaries = summaries_for(run_spec["kind"]) if run_spec["kind"] else (None, None)

        logger.info("\n" + "=" * 60)
        logger.info(f"[{run_spec['suite']}] {run_spec['label']}")
        logger.info("=" * 60)

        result = train(train_set, train_summaries, config, out_dir=out_dir / f"run-{index:02d}")
        embeddings = embed_dataset(test_set, test_summaries, result.model)
        report = evaluate_all(embeddings, summaries=test_summaries)
        save_report(report, out_dir / f"run-{index:02d}" / "report.json")

        rows.append({
            "suite": run_spec["suite"],
            "run": run_spec["label"],
            "mR1": round(report.mean_r1, 2),
            "MRR": round(report.mean_mrr, 4),
            "NDCG10": round(report.mean_ndcg10, 4),
            "fusion_params": count_parameters(result.model.trunk(DomainId.P).fusion)
            if model_config.modality is Modality.MULTIMODAL else 0,
            "final_loss": round(result.logs[-1].losses.total, 4),
        })
        logger.info(f"✓ {run_spec['label']}: mR1 {report.mean_r1:.2f}")
    return pd.DataFrame(rows)


def main() -> int:
    parser = argparse.ArgumentParser(description="Run the tri-domain ablation suite")
    parser.add_argument("--out", required=True, help="Working directory for datasets, runs and the table")
    parser.add_argument("--synth-config", help="SynthConfig JSON (reference defaults when omitted)")
    parser.add_argument("--train-config", help="TrainingConfig JSON (desk defaults when omitted)")
    parser.add_argument("--suites", default=",".join(SUITES),
                        help=f"Comma-separated subset of {', '.join(SUITES)}")
    parser.add_argument("--epochs", type=int, default=None, help="Override the training epoch count")
    args = parser.parse_args()

    suites = [s.strip() for s in args.suites.split(",") if s.strip()]
    unknown = sorted(set(suites) - set(SUITES))
    if unknown:
        parser.error(f"unknown suites: {', '.join(unknown)}")

    synth_config = (SynthConfig.model_validate(orjson.loads(Path(args.synth_config).read_bytes()))
                    if args.synth_config else SynthConfig())
    base_config = (TrainingConfig.model_validate(orjson.loads(Path(args.train_config).read_bytes()))
                   if args.train_config else TrainingConfig())

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = run_suite(synth_config, base_config, out_dir, suites, epochs=args.epochs)
    table.to_csv(out_dir / "ablations.csv", index=False)

    print(table.to_string(index=False))
    logger.info(f"✓ Table written to {out_dir / 'ablations.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
