"""
TriDomain Retrieval Training
Inter-domain contrastive and intra-domain classification objectives, the
joint training loop, checkpoints and finite-difference gradient checks
"""

import logging
import math
from itertools import combinations
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, field_validator
from torch import nn

from app.exceptions import DataValidationError, TrainingDivergenceError
from app.modules.encoders import Vocabulary
from app.modules.fusion import ProductEmbeddingModel, prepare_inputs
from app.modules.summarization import summarize_dataset, summary_text
from app.modules.synthgen import generate_corpus
from app.schemas import (
    ASR_MISSING_TEXT,
    NO_OUTPUT_TEXT,
    DomainId,
    EpochLog,
    GradCheckResult,
    LossBreakdown,
    Modality,
    ModelConfig,
    ProductInstance,
    SummarizerKind,
    SummaryRecord,
    SynthConfig,
    TrainingConfig,
)
from app.services.tensor_io import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tridomain-checkpoint"
CHECKPOINT_VERSION = 1

PARAMETER_GROUPS = ("text", "visual", "fusion", "other")

LOSS_LOG_COLUMNS = ["epoch", "L_PS", "L_PL", "L_SL", "CE_P", "CE_S", "CE_L", "total",
                    "lr_group_1", "lr_group_2", "lr_group_3", "lr_group_4"]

# Gradient norms below this are compared in absolute terms
GRADCHECK_SCALE_FLOOR = 1e-3


# =============================================================================
# Batches
# =============================================================================

class DomainBatch(BaseModel):
    """Model inputs for the batch members of one domain"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    frames: Optional[torch.Tensor] = None
    token_ids: Optional[torch.Tensor] = None
    token_valid: Optional[torch.Tensor] = None

    def to_dtype(self, dtype: torch.dtype) -> "DomainBatch":
        frames = self.frames.to(dtype) if self.frames is not None else None
        return DomainBatch(frames=frames, token_ids=self.token_ids, token_valid=self.token_valid)


class BatchTriplet(BaseModel):
    """B products, each with one instance per present domain"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    inputs: Dict[DomainId, DomainBatch]
    labels: torch.Tensor
    batch_id: int = 0

    @field_validator("labels")
    @classmethod
    def validate_labels(cls, v: torch.Tensor) -> torch.Tensor:
        if v.ndim != 1 or v.shape[0] < 2:
            raise ValueError("a batch needs at least two products")
        return v

    def to_dtype(self, dtype: torch.dtype) -> "BatchTriplet":
        return BatchTriplet(inputs={d: b.to_dtype(dtype) for d, b in self.inputs.items()},
                            labels=self.labels, batch_id=self.batch_id)


# =============================================================================
# Losses
# =============================================================================

def info_nce_pair(e_a: torch.Tensor, e_b: torch.Tensor,
                  temperature: Union[float, torch.Tensor]) -> torch.Tensor:
    """
    Symmetric InfoNCE between two aligned embedding batches

    Row i of e_a and row i of e_b are positives; other rows are negatives.
    Mean of the row-wise and column-wise cross-entropies of e_a e_b^T / tau.
    """
    tau = torch.as_tensor(temperature, dtype=e_a.dtype)
    if not bool((tau > 0).all()):
        raise ValueError(f"temperature must be positive, got {tau.item()}")
    if e_a.shape != e_b.shape or e_a.ndim != 2:
        raise ValueError(f"embedding shapes differ: {tuple(e_a.shape)} vs {tuple(e_b.shape)}")
    if e_a.shape[0] < 2:
        raise ValueError("contrastive loss needs a batch of at least two")
    with torch.no_grad():
        for e in (e_a, e_b):
            if (e.detach().norm(dim=1) - 1.0).abs().max().item() > 1e-3:
                raise ValueError("embeddings must be unit-norm rows")

    logits = e_a @ e_b.T / tau
    targets = torch.arange(e_a.shape[0], device=e_a.device)
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))


def classification_loss(embeddings: torch.Tensor, labels: torch.Tensor,
                        classifier: Callable[[torch.Tensor], torch.Tensor],
                        num_classes: int) -> torch.Tensor:
    """Softmax cross-entropy of a linear product classifier, mean over the batch"""
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    logits = classifier(embeddings)
    if logits.shape[-1] != num_classes:
        raise ValueError(f"classifier emits {logits.shape[-1]} classes, expected {num_classes}")
    return F.cross_entropy(logits, labels)


class LossTerms:
    """Differentiable loss terms of one step"""

    def __init__(self, contrastive: Dict[str, torch.Tensor],
                 classification: Dict[str, torch.Tensor], temperature: torch.Tensor):
        self.contrastive = contrastive
        self.classification = classification
        self.temperature = temperature
        self.total = sum(contrastive.values()) + sum(classification.values())

    def breakdown(self) -> LossBreakdown:
        contrastive = {k: v.item() for k, v in self.contrastive.items()}
        classification = {k: v.item() for k, v in self.classification.items()}
        return LossBreakdown(
            contrastive=contrastive,
            classification=classification,
            total=math.fsum([*contrastive.values(), *classification.values()]),
            temperature=self.temperature.item(),
        )


def combined_loss(batch: BatchTriplet, model: nn.Module,
                  excluded_domains: Sequence[DomainId] = ()) -> LossTerms:
    """
    Three pairwise contrastive terms plus three classification terms, unit weights

    Excluded domains drop every term that mentions them.
    """
    present = [d for d in DomainId.ordered() if d in batch.inputs and d not in excluded_domains]
    if len(present) < 2:
        raise ValueError("at least two domains are needed for a contrastive pair")

    embeddings = {
        d: model(batch.inputs[d].frames, batch.inputs[d].token_ids, batch.inputs[d].token_valid, d)
        for d in present
    }
    tau = model.temperature
    contrastive = {
        a.value + b.value: info_nce_pair(embeddings[a], embeddings[b], tau)
        for a, b in combinations(present, 2)
    }
    classification = {
        d.value: classification_loss(embeddings[d], batch.labels,
                                     lambda e, d=d: model.classify(e, d), model.num_classes)
        for d in present
    }
    return LossTerms(contrastive, classification, tau)


# =============================================================================
# Optimizer and Schedule
# =============================================================================

def parameter_group(name: str) -> str:
    """Optimizer group of a parameter: text, visual, fusion or other"""
    if ".text_encoder." in name:
        return "text"
    if ".frame_encoder." in name or ".temporal." in name:
        return "visual"
    if ".fusion." in name:
        return "fusion"
    return "other"


def build_optimizer(model: nn.Module, config: TrainingConfig) -> torch.optim.AdamW:
    """AdamW with four groups in order text, visual, fusion, other"""
    grouped: Dict[str, List[nn.Parameter]] = {g: [] for g in PARAMETER_GROUPS}
    for name, param in model.named_parameters():
        grouped[parameter_group(name)].append(param)
    groups = [
        {"params": grouped[g], "lr": lr, "name": g}
        for g, lr in zip(PARAMETER_GROUPS, config.peak_learning_rates)
    ]
    return torch.optim.AdamW(groups, betas=config.betas, weight_decay=config.weight_decay)


def warmup_cosine_factor(step: int, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to 1 over warmup_steps, then cosine decay to 0 at total_steps"""
    if warmup_steps > 0 and step < warmup_steps:
        return (step + 1) / warmup_steps
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def build_scheduler(optimizer: torch.optim.Optimizer, warmup_steps: int,
                    total_steps: int) -> torch.optim.lr_scheduler.LambdaLR:
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: warmup_cosine_factor(step, warmup_steps, total_steps)
    )


# =============================================================================
# Checkpoints
# =============================================================================

def save_model_checkpoint(path: Union[str, Path], model: ProductEmbeddingModel) -> Path:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.model_dump(mode="json"),
        "num_classes": model.num_classes,
    }
    tensors = {name: t.detach().cpu().float().numpy() for name, t in model.state_dict().items()}
    return save_checkpoint(path, header, tensors)


def load_model_checkpoint(path: Union[str, Path]) -> ProductEmbeddingModel:
    header, tensors = load_checkpoint(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataValidationError(f"not a model checkpoint: {path}", path=str(path))
    config = ModelConfig.model_validate(header["model_config"])
    model = ProductEmbeddingModel(config, num_classes=int(header.get("num_classes", 0)))
    try:
        model.load_state_dict({name: torch.from_numpy(arr) for name, arr in tensors.items()})
    except RuntimeError as e:
        raise DataValidationError(f"checkpoint does not match its config: {path}", path=str(path)) from e
    logger.info(f"✓ Loaded checkpoint {path}")
    return model


def write_loss_log(logs: Sequence[EpochLog], path: Union[str, Path]) -> Path:
    """Per-epoch loss terms and learning rates as CSV"""
    rows = []
    for log in logs:
        row = {"epoch": log.epoch, "total": log.losses.total}
        for pair in ("PS", "PL", "SL"):
            row[f"L_{pair}"] = log.losses.contrastive.get(pair)
        for domain in ("P", "S", "L"):
            row[f"CE_{domain}"] = log.losses.classification.get(domain)
        for i, lr in enumerate(log.learning_rates, start=1):
            row[f"lr_group_{i}"] = lr
        rows.append(row)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=LOSS_LOG_COLUMNS).to_csv(path, index=False, na_rep="")
    return path


# =============================================================================
# Training Loop
# =============================================================================

class TrainingResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: ProductEmbeddingModel
    logs: List[EpochLog]
    checkpoints: List[Path]


def training_texts(summaries: Mapping[str, SummaryRecord]) -> List[str]:
    """Texts the vocabulary is built from, fallback strings included"""
    return [summary_text(s) for s in summaries.values()] + [NO_OUTPUT_TEXT, ASR_MISSING_TEXT]


class _PreparedCorpus:
    """Per-instance tensors and per-product instance lists for batch assembly"""

    def __init__(self, instances: Sequence[ProductInstance], summaries: Optional[Mapping[str, SummaryRecord]],
                 model_config: ModelConfig, domains: Sequence[DomainId]):
        by_product: Dict[str, Dict[DomainId, List[int]]] = {}
        for i, inst in enumerate(instances):
            if inst.domain in domains:
                by_product.setdefault(inst.product_id, {}).setdefault(inst.domain, []).append(i)

        self.products = [pid for pid, members in by_product.items() if all(d in members for d in domains)]
        dropped = len(by_product) - len(self.products)
        if dropped:
            logger.warning(f"{dropped} products lack an instance in every trained domain and are skipped")
        if len(self.products) < 2:
            raise DataValidationError("training needs at least two products with all trained domains")
        self.members = {pid: by_product[pid] for pid in self.products}

        try:
            self.frames, self.ids, self.valid = prepare_inputs(instances, summaries, model_config)
        except ValueError as e:
            raise DataValidationError(str(e)) from e

    def batch(self, product_indices: Sequence[int], domains: Sequence[DomainId],
              rng: np.random.Generator, batch_id: int) -> BatchTriplet:
        inputs = {}
        chosen = {d: [] for d in domains}
        for p in product_indices:
            members = self.members[self.products[p]]
            for d in domains:
                options = members[d]
                chosen[d].append(options[int(rng.integers(len(options)))])
        for d, rows in chosen.items():
            index = torch.tensor(rows, dtype=torch.long)
            inputs[d] = DomainBatch(
                frames=self.frames[index] if self.frames is not None else None,
                token_ids=self.ids[index] if self.ids is not None else None,
                token_valid=self.valid[index] if self.valid is not None else None,
            )
        return BatchTriplet(inputs=inputs, labels=torch.tensor(list(product_indices), dtype=torch.long),
                            batch_id=batch_id)


def _epoch_batches(num_products: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(num_products)
    batches = [order[i:i + batch_size] for i in range(0, num_products, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def _mean_breakdown(items: Sequence[LossBreakdown], temperature: float) -> LossBreakdown:
    contrastive = {k: float(np.mean([b.contrastive[k] for b in items])) for k in items[0].contrastive}
    classification = {k: float(np.mean([b.classification[k] for b in items])) for k in items[0].classification}
    return LossBreakdown(
        contrastive=contrastive,
        classification=classification,
        total=math.fsum([*contrastive.values(), *classification.values()]),
        temperature=temperature,
    )


def train(
    instances: Sequence[ProductInstance],
    summaries: Optional[Mapping[str, SummaryRecord]],
    config: TrainingConfig,
    out_dir: Optional[Union[str, Path]] = None,
    seed: Optional[int] = None
) -> TrainingResult:
    """
    Jointly train the three-branch model

    Args:
        instances: Training instances of all domains
        summaries: Summaries keyed by instance_id (unused for visual-only models)
        config: Training configuration
        out_dir: Where checkpoints and the loss log go (nothing written when None)
        seed: Overrides config.seed

    Returns:
        TrainingResult with the trained model and the per-epoch log
    """
    seed = config.seed if seed is None else seed
    domains = config.present_domains
    model_config = config.model
    if model_config.modality is not Modality.VISUAL and not model_config.vocab:
        if summaries is None:
            raise DataValidationError("text modality requires summaries")
        vocab = Vocabulary.build(training_texts(summaries))
        model_config = model_config.model_copy(update={"vocab": vocab.pieces})
        logger.info(f"Vocabulary built: {len(vocab)} pieces")

    corpus = _PreparedCorpus(instances, summaries, model_config, domains)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = ProductEmbeddingModel(model_config, num_classes=len(corpus.products))
    optimizer = build_optimizer(model, config)

    steps_per_epoch = len(_epoch_batches(len(corpus.products), config.batch_size, np.random.default_rng(0)))
    scheduler = build_scheduler(optimizer, config.warmup_epochs * steps_per_epoch,
                                config.epochs * steps_per_epoch)
    out_path = Path(out_dir) if out_dir is not None else None
    logs: List[EpochLog] = []
    checkpoints: List[Path] = []
    step = 0

    logger.info(f"Training on {len(corpus.products)} products, domains "
                f"{''.join(d.value for d in domains)}, {config.epochs} epochs")
    for epoch in range(config.epochs):
        model.train()
        learning_rates = [group["lr"] for group in optimizer.param_groups]
        breakdowns: List[LossBreakdown] = []
        for product_indices in _epoch_batches(len(corpus.products), config.batch_size, rng):
            batch = corpus.batch(product_indices, domains, rng, batch_id=step)
            terms = combined_loss(batch, model, config.excluded_domains)
            if not torch.isfinite(terms.total):
                logger.error(f"Non-finite loss at batch {step}")
                raise TrainingDivergenceError(batch_id=step, epoch=epoch)
            optimizer.zero_grad()
            terms.total.backward()
            optimizer.step()
            scheduler.step()
            breakdowns.append(terms.breakdown())
            step += 1

        epoch_loss = _mean_breakdown(breakdowns, model.temperature.item())
        logs.append(EpochLog(epoch=epoch, losses=epoch_loss, learning_rates=learning_rates))
        logger.info(f"Epoch {epoch}: total={epoch_loss.total:.4f} tau={epoch_loss.temperature:.4f}")

        if out_path is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            checkpoints.append(save_model_checkpoint(out_path / f"checkpoint-epoch{epoch + 1:03d}.ckpt", model))

    if out_path is not None:
        checkpoints.append(save_model_checkpoint(out_path / "checkpoint.ckpt", model))
        write_loss_log(logs, out_path / "loss_log.csv")
    logger.info(f"✓ Training complete ({step} steps)")
    return TrainingResult(model=model, logs=logs, checkpoints=checkpoints)


# =============================================================================
# Gradient Verification
# =============================================================================

def gradcheck_fixture(model_config: ModelConfig, batch_size: int = 4,
                      seed: int = 0) -> Tuple[ProductEmbeddingModel, BatchTriplet]:
    """Double-precision model and one synthetic batch of batch_size products"""
    synth = SynthConfig(num_products=batch_size, instances_per_domain=1,
                        frame_shape=model_config.frame_shape, asr_noise_ratio=0.5,
                        asr_missing_rate=0.0, seed=seed)
    corpus = generate_corpus(synth, workers=1)
    summaries = {s.instance_id: s for s in summarize_dataset(corpus.instances, SummarizerKind.LLM_MOCK)}
    if model_config.modality is not Modality.VISUAL and not model_config.vocab:
        model_config = model_config.model_copy(
            update={"vocab": Vocabulary.build(training_texts(summaries)).pieces}
        )

    domains = DomainId.ordered()
    prepared = _PreparedCorpus(corpus.instances, summaries, model_config, domains)
    torch.manual_seed(seed)
    model = ProductEmbeddingModel(model_config, num_classes=batch_size).double()
    batch = prepared.batch(list(range(batch_size)), domains, np.random.default_rng(seed), batch_id=0)
    return model, batch.to_dtype(torch.float64)


def grad_check(
    model: nn.Module,
    batch: BatchTriplet,
    epsilon: float = 1e-5,
    samples_per_tensor: int = 200,
    param_filter: Optional[Sequence[str]] = None,
    excluded_domains: Sequence[DomainId] = (),
    seed: int = 0
) -> GradCheckResult:
    """
    Compare autograd gradients of combined_loss with central differences

    Per tensor, min(samples_per_tensor, numel) entries are perturbed by
    +-epsilon; the error is ||g_analytic - g_numeric|| / max(||g_analytic|| +
    ||g_numeric||, GRADCHECK_SCALE_FLOOR) over the sampled entries.

    Args:
        model: Double-precision model
        batch: Batch in double precision
        param_filter: Substrings selecting parameter names (all when None)
    """
    if any(p.dtype != torch.float64 for p in model.parameters()):
        raise ValueError("grad_check requires a double-precision model")

    def loss_value() -> torch.Tensor:
        return combined_loss(batch, model, excluded_domains).total

    model.eval()
    model.zero_grad()
    loss_value().backward()

    rng = np.random.default_rng(seed)
    per_tensor: Dict[str, float] = {}
    checked = 0
    with torch.no_grad():
        for name, param in model.named_parameters():
            if param_filter and not any(f in name for f in param_filter):
                continue
            flat = param.data.view(-1)
            analytic_all = param.grad.reshape(-1) if param.grad is not None else torch.zeros_like(flat)
            count = min(samples_per_tensor, flat.numel())
            picks = rng.choice(flat.numel(), size=count, replace=False)

            analytic = np.empty(count)
            numeric = np.empty(count)
            for j, idx in enumerate(picks):
                original = float(flat[idx])
                flat[idx] = original + epsilon
                plus = float(loss_value())
                flat[idx] = original - epsilon
                minus = float(loss_value())
                flat[idx] = original
                numeric[j] = (plus - minus) / (2.0 * epsilon)
                analytic[j] = float(analytic_all[idx])

            scale = max(float(np.linalg.norm(analytic) + np.linalg.norm(numeric)), GRADCHECK_SCALE_FLOOR)
            per_tensor[name] = float(np.linalg.norm(analytic - numeric)) / scale
            checked += count

    if not per_tensor:
        raise ValueError("no parameters matched the filter")
    worst = max(per_tensor, key=per_tensor.get)
    logger.info(f"✓ Gradient check: {len(per_tensor)} tensors, max rel err "
                f"{per_tensor[worst]:.2e} ({worst})")
    return GradCheckResult(
        max_rel_error=per_tensor[worst],
        per_tensor=per_tensor,
        epsilon=epsilon,
        samples_per_tensor=samples_per_tensor,
        checked_entries=checked,
    )
