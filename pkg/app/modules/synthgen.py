"""
TriDomain Retrieval Synthetic Corpus Generator
Deterministic P/S/L product corpus with ground-truth names and attributes
and a controllable ASR noise model
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import orjson
from pydantic import BaseModel, ConfigDict

from app.config import settings
from app.modules.summarization import FEATURE_MARKER, NAME_MARKER
from app.schemas import ASR_MISSING_TEXT, DomainId, GroundTruthRecord, ProductInstance, SynthConfig
from app.services.tensor_io import save_dataset, save_ground_truth

logger = logging.getLogger(__name__)


# =============================================================================
# Vocabularies
# =============================================================================

NAME_ADJECTIVES = [
    "amber", "arctic", "bold", "brisk", "cedar", "coral", "crisp", "dusky", "ember", "fern",
    "frost", "golden", "hazel", "indigo", "ivory", "jade", "lunar", "maple", "misty", "nova",
    "onyx", "pearl", "quartz", "rapid", "ruby", "sable", "silver", "solar", "swift", "terra",
    "urban", "velvet", "vivid", "willow", "zephyr", "cobalt", "scarlet", "tidal", "alpine", "sonic",
]

NAME_NOUNS = [
    "kettle", "blender", "shaver", "lamp", "speaker", "backpack", "sneaker", "jacket", "mug",
    "toaster", "headset", "charger", "wallet", "watch", "pillow", "blanket", "skillet", "grinder",
    "trimmer", "mixer", "scooter", "tumbler", "cooler", "heater", "fan", "camera", "tripod",
    "keyboard", "mouse", "router", "humidifier", "diffuser", "purifier", "vacuum", "iron",
    "dryer", "brush", "razor", "juicer", "cooker",
]

ATTRIBUTE_VOCAB = [
    "waterproof", "rechargeable", "stainless", "wireless", "foldable", "lightweight", "portable",
    "ceramic", "cordless", "adjustable", "ergonomic", "compact", "insulated", "breathable",
    "washable", "magnetic", "bamboo", "leather", "cotton", "titanium", "aluminum", "nonstick",
    "dishwasher-safe", "usb-c", "bluetooth", "dual-speed", "quick-charge", "noise-cancelling",
    "ultra-quiet", "anti-slip", "scratch-proof", "shockproof", "dustproof", "odorless",
    "bpa-free", "heat-resistant", "long-battery", "touch-control", "led-display", "timer",
    "three-gear", "travel-size", "hypoallergenic", "eco-friendly", "glass-lid", "copper-core",
    "matte-finish", "quick-dry", "self-cleaning", "overheat-protection",
]

CHATTER_VOCAB = [
    "okay", "guys", "welcome", "everyone", "yeah", "um", "uh", "wow", "amazing", "deal",
    "price", "link", "cart", "hurry", "today", "love", "family", "friends", "check", "look",
    "honestly", "seriously", "babies", "sisters", "coupon", "stock", "grab", "quick", "trust",
    "gift", "super", "nice", "cute", "follow", "subscribe", "hello", "thanks", "gorgeous",
    "crazy", "bargain", "chat", "questions", "comment", "discount", "shipping", "limited",
    "minute", "ready", "awesome", "perfect", "delivery", "order", "favorite", "lovely",
]

# Per-product RNG stream purposes
_STREAM_PROTOTYPE = 0
_STREAM_TRUTH = 1
_STREAM_INSTANCES = 2
_STREAM_BASE = 1_000_001
_STREAM_DISTRACTORS = 1_000_002
_STREAM_SPLIT = 1_000_003

_DISTRACTOR_BANK_SIZE = 8
_MIN_ATTRIBUTES = 3
_MAX_ATTRIBUTES = 6


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


# =============================================================================
# Products and Ground Truth
# =============================================================================

def product_id_for(index: int) -> str:
    return f"p{index:04d}"


def product_name(index: int, rng: np.random.Generator) -> str:
    """Name grammar {adjective}-{noun}-{index}; the index suffix keeps names unique"""
    adjective = NAME_ADJECTIVES[int(rng.integers(len(NAME_ADJECTIVES)))]
    noun = NAME_NOUNS[int(rng.integers(len(NAME_NOUNS)))]
    return f"{adjective}-{noun}-{index:03d}"


def _ground_truth(index: int, seed: int) -> GroundTruthRecord:
    rng = _stream(seed, index, _STREAM_TRUTH)
    name = product_name(index, rng)
    count = int(rng.integers(_MIN_ATTRIBUTES, _MAX_ATTRIBUTES + 1))
    picks = rng.choice(len(ATTRIBUTE_VOCAB), size=count, replace=False)
    return GroundTruthRecord(product_id=product_id_for(index), true_name=name,
                             true_attributes=[ATTRIBUTE_VOCAB[int(i)] for i in picks])


def generate_products(config: SynthConfig) -> Tuple[np.ndarray, List[GroundTruthRecord]]:
    """
    Visual prototypes and ground truth for every product

    prototype_i = base * sqrt(s) + independent_i * sqrt(1 - s), with s the
    inter-product similarity and base shared by all products.

    Returns:
        (prototypes of shape (N, H, W, C), ground truth in product order)
    """
    s = config.visual_inter_similarity
    base = _stream(config.seed, _STREAM_BASE).standard_normal(config.frame_shape)
    prototypes = np.stack([
        base * math.sqrt(s)
        + _stream(config.seed, i, _STREAM_PROTOTYPE).standard_normal(config.frame_shape) * math.sqrt(1.0 - s)
        for i in range(config.num_products)
    ])
    truth = [_ground_truth(i, config.seed) for i in range(config.num_products)]
    return prototypes, truth


def distractor_bank(config: SynthConfig) -> np.ndarray:
    """Overlay patches shared by all live-stream instances"""
    size = config.distractor_size
    channels = config.frame_shape[2]
    return _stream(config.seed, _STREAM_DISTRACTORS).standard_normal(
        (_DISTRACTOR_BANK_SIZE, size, size, channels)
    ) * 2.0


# =============================================================================
# ASR Noise
# =============================================================================

def product_title(truth: GroundTruthRecord, title_attributes: int) -> str:
    """Clean product-page title: marked name followed by marked attributes"""
    tokens = [NAME_MARKER + truth.true_name]
    tokens += [FEATURE_MARKER + a for a in truth.true_attributes[:title_attributes]]
    return " ".join(tokens)


def inject_asr_noise(true_name: str, attributes: Sequence[str], config: SynthConfig,
                     rng: np.random.Generator) -> str:
    """
    Transcript with signal tokens interleaved in chatter

    Filler is added until the spoken signal characters make up about
    1 - asr_noise_ratio of the spoken transcript. With probability
    asr_missing_rate the transcript is the missing-ASR dummy; with
    probability no_output_rate it carries filler only.
    """
    if rng.random() < config.asr_missing_rate:
        return ASR_MISSING_TEXT
    filler_only = rng.random() < config.no_output_rate or config.asr_noise_ratio >= 1.0

    payloads = [true_name, *attributes]
    signal_len = len(" ".join(payloads))
    signal = [NAME_MARKER + true_name] + [FEATURE_MARKER + a for a in attributes]
    if config.asr_noise_ratio <= 0.0 and not filler_only:
        return " ".join(signal)

    ratio = min(config.asr_noise_ratio, 0.99)
    target = signal_len / (1.0 - ratio)
    fillers: List[str] = []
    spoken = 0 if filler_only else signal_len
    while spoken < target:
        word = CHATTER_VOCAB[int(rng.integers(len(CHATTER_VOCAB)))]
        spoken += len(word) + (1 if spoken else 0)
        fillers.append(word)

    if filler_only:
        return " ".join(fillers)

    # Signal tokens keep their order at random slots among the fillers
    total = len(fillers) + len(signal)
    slots = set(np.sort(rng.choice(total, size=len(signal), replace=False)).tolist())
    tokens: List[str] = []
    signal_iter = iter(signal)
    filler_iter = iter(fillers)
    for position in range(total):
        tokens.append(next(signal_iter) if position in slots else next(filler_iter))
    return " ".join(tokens)


# =============================================================================
# Instance Rendering
# =============================================================================

def _warp(image: np.ndarray, dy: int, dx: int, scale: float) -> np.ndarray:
    """Nearest-neighbour zoom about the centre followed by a circular shift"""
    h, w = image.shape[:2]
    ys = np.clip(np.round((np.arange(h) - (h - 1) / 2) / scale + (h - 1) / 2), 0, h - 1).astype(int)
    xs = np.clip(np.round((np.arange(w) - (w - 1) / 2) / scale + (w - 1) / 2), 0, w - 1).astype(int)
    return np.roll(image[ys][:, xs], shift=(dy, dx), axis=(0, 1))


def _transform_path(prototype: np.ndarray, num_frames: int, shift_amplitude: float,
                    scale_amplitude: float, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth shift/scale trajectory over the frames plus per-pixel noise"""
    phase_y, phase_x, phase_s = rng.uniform(0.0, 2.0 * math.pi, size=3)
    frames = []
    for t in range(num_frames):
        angle = 2.0 * math.pi * t / num_frames
        dy = int(round(shift_amplitude * math.sin(angle + phase_y)))
        dx = int(round(shift_amplitude * math.sin(angle + phase_x)))
        scale = 1.0 + scale_amplitude * math.sin(angle + phase_s)
        frame = _warp(prototype, dy, dx, max(scale, 0.1))
        if noise_std > 0:
            frame = frame + rng.normal(0.0, noise_std, size=frame.shape)
        frames.append(frame)
    return np.stack(frames)


def render_domain_instance(
    prototype: np.ndarray,
    domain: DomainId,
    config: SynthConfig,
    rng: np.random.Generator,
    truth: GroundTruthRecord,
    instance_id: str,
    distractors: Optional[np.ndarray] = None
) -> ProductInstance:
    """
    One instance of a product in a domain

    P: a single frame near the prototype with the clean title.
    S: short_video_frames frames along a mild transform path.
    L: live_stream_frames frames with a wider path and a distractor patch.
    S and L carry a noisy transcript.
    """
    variance = config.visual_intra_variance
    domain = DomainId(domain)
    if domain is DomainId.P:
        frame = prototype
        if variance > 0:
            frame = prototype + rng.normal(0.0, 0.1 * variance, size=prototype.shape)
        frames = frame[None]
        raw_text = product_title(truth, config.title_attributes)
    elif domain is DomainId.S:
        frames = _transform_path(prototype, config.short_video_frames, 2.0 * variance,
                                 0.2 * variance, variance, rng)
        raw_text = inject_asr_noise(truth.true_name, truth.true_attributes, config, rng)
    else:
        frames = _transform_path(prototype, config.live_stream_frames, 4.0 * variance,
                                 0.4 * variance, variance, rng)
        if distractors is not None and len(distractors):
            patch = distractors[int(rng.integers(len(distractors)))]
            size = patch.shape[0]
            y = int(rng.integers(prototype.shape[0] - size + 1))
            x = int(rng.integers(prototype.shape[1] - size + 1))
            frames = frames.copy()
            frames[:, y:y + size, x:x + size, :] = patch
        raw_text = inject_asr_noise(truth.true_name, truth.true_attributes, config, rng)

    return ProductInstance(
        product_id=truth.product_id,
        instance_id=instance_id,
        domain=domain,
        frames=frames.astype(np.float32),
        raw_text=raw_text,
    )


# =============================================================================
# Corpus
# =============================================================================

class SyntheticCorpus(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    instances: List[ProductInstance]
    ground_truth: List[GroundTruthRecord]
    prototypes: np.ndarray


def _render_product(index: int, prototype: np.ndarray, truth: GroundTruthRecord,
                    config: SynthConfig, distractors: np.ndarray) -> List[ProductInstance]:
    rng = _stream(config.seed, index, _STREAM_INSTANCES)
    instances = []
    for domain in DomainId.ordered():
        for k in range(config.instances_per_domain):
            instances.append(render_domain_instance(
                prototype, domain, config, rng, truth,
                instance_id=f"{truth.product_id}-{domain.value}{k}", distractors=distractors,
            ))
    return instances


def generate_corpus(config: SynthConfig, workers: Optional[int] = None) -> SyntheticCorpus:
    """
    Build the whole corpus in memory

    Products render in parallel on their own RNG streams, so the result is
    identical for any worker count.
    """
    prototypes, truth = generate_products(config)
    distractors = distractor_bank(config)
    workers = workers or settings.worker_concurrency

    with ThreadPoolExecutor(max_workers=workers) as pool:
        rendered = list(pool.map(
            lambda i: _render_product(i, prototypes[i], truth[i], config, distractors),
            range(config.num_products),
        ))
    instances = [inst for product in rendered for inst in product]
    logger.info(f"Generated {len(instances)} instances for {config.num_products} products")
    return SyntheticCorpus(instances=instances, ground_truth=truth, prototypes=prototypes)


def split_products(config: SynthConfig) -> Tuple[List[str], List[str]]:
    """Disjoint (train, test) product ids"""
    n = config.num_products
    n_test = max(1, min(n - 1, int(round(n * config.test_fraction))))
    order = _stream(config.seed, _STREAM_SPLIT).permutation(n)
    test = sorted(product_id_for(int(i)) for i in order[:n_test])
    test_set = set(test)
    train = [product_id_for(i) for i in range(n) if product_id_for(i) not in test_set]
    return train, test


def generate_dataset(config: SynthConfig, out_dir: Union[str, Path],
                     workers: Optional[int] = None) -> Dict[str, Path]:
    """
    Write train/test manifests, tensors, ground truth and the generating config

    Returns:
        Paths keyed train, test, ground_truth, config
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(config, workers)
    train_ids, test_ids = split_products(config)
    test_set = set(test_ids)

    paths = {
        "train": save_dataset([i for i in corpus.instances if i.product_id not in test_set], out / "train.jsonl"),
        "test": save_dataset([i for i in corpus.instances if i.product_id in test_set], out / "test.jsonl"),
        "ground_truth": out / "ground_truth.jsonl",
        "config": out / "synth_config.json",
    }
    save_ground_truth(corpus.ground_truth, paths["ground_truth"])
    paths["config"].write_bytes(
        orjson.dumps(config.model_dump(mode="json"), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS)
    )
    logger.info(f"✓ Dataset written to {out} ({len(train_ids)} train / {len(test_ids)} test products)")
    return paths
