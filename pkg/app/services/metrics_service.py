import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.signal import convolve2d
from scipy.special import rel_entr
from tqdm import tqdm

from app.core.configs import MetricsConfig, PipelineConfig
from app.core.exceptions import ContractError, TryOnError
from app.schemas import MetricReport, RequestMix, RequestTrace, ThroughputStats, TrainingPair, UserInput
from app.services.pose_service import encode_heatmaps
from app.services.ptn_network import PoseTransferGenerator, generator_forward

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])


# -----------------------
# Structural similarity
# -----------------------
def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ContractError(f"dimension mismatch: {np.shape(a)} vs {np.shape(b)}", field="b")


def ssim_components(a: np.ndarray, b: np.ndarray, cfg: Optional[MetricsConfig] = None) -> Tuple[float, float]:
    """(mean SSIM, mean contrast-structure term) over valid windows of two luminance planes."""
    cfg = cfg or MetricsConfig()
    if min(a.shape) < cfg.ssim_window:
        raise ContractError(f"image {a.shape} is smaller than the {cfg.ssim_window}px SSIM window", field="a")
    w = gaussian_window(cfg.ssim_window, cfg.ssim_sigma)
    c1, c2 = cfg.k1 ** 2, cfg.k2 ** 2

    def filt(x: np.ndarray) -> np.ndarray:
        return convolve2d(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    cs_map = (2.0 * cov + c2) / (var_a + var_b + c2)
    l_map = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    return float(np.mean(l_map * cs_map)), float(np.mean(cs_map))


def ssim(a: np.ndarray, b: np.ndarray, cfg: Optional[MetricsConfig] = None) -> float:
    _check_pair(a, b)
    return ssim_components(luminance(a), luminance(b), cfg)[0]


def downsample(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling; an odd trailing row or column is dropped."""
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim_min_side(cfg: Optional[MetricsConfig] = None) -> int:
    cfg = cfg or MetricsConfig()
    return cfg.ssim_window * 2 ** (len(cfg.ms_ssim_weights) - 1)


def ms_ssim(a: np.ndarray, b: np.ndarray, cfg: Optional[MetricsConfig] = None) -> float:
    cfg = cfg or MetricsConfig()
    _check_pair(a, b)
    min_side = ms_ssim_min_side(cfg)
    if min(np.shape(a)[:2]) < min_side:
        raise ContractError(
            f"image {np.shape(a)[:2]} too small for {len(cfg.ms_ssim_weights)} scales; minimum side is {min_side}px",
            field="a",
        )
    x, y = luminance(a), luminance(b)
    weights = cfg.ms_ssim_weights
    value = 1.0
    for j, weight in enumerate(weights):
        s, cs = ssim_components(x, y, cfg)
        term = s if j == len(weights) - 1 else cs
        # negative terms would make the fractional power undefined
        value *= max(term, 0.0) ** weight
        if j < len(weights) - 1:
            x, y = downsample(x), downsample(y)
    return float(value)


# -----------------------
# Inception score
# -----------------------
def inception_score(probs: Union[np.ndarray, Sequence[Sequence[float]]], splits: int = 1) -> Tuple[float, float]:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ContractError("probs must be a non-empty (N, C) array", field="probs")
    if splits < 1 or p.shape[0] < splits:
        raise ContractError(f"{p.shape[0]} images cannot fill {splits} splits", field="splits")
    for i, row in enumerate(p):
        if np.any(row < 0) or abs(row.sum() - 1.0) > 1e-6:
            raise ContractError(f"probability vector {i} is not normalized", field=f"probs[{i}]")

    scores = []
    for part in np.array_split(p, splits):
        marginal = part.mean(axis=0, keepdims=True)
        kl = rel_entr(part, marginal).sum(axis=1)
        scores.append(float(np.exp(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))


class ProbabilityProvider(Protocol):
    identifier: str

    def __call__(self, images: Sequence[np.ndarray]) -> np.ndarray: ...


class ColorHistogramProvider:
    """Quantized-color histogram as a class distribution; offline and deterministic."""

    def __init__(self, bins: int = 4):
        self.bins = bins
        self.identifier = f"color_histogram:{bins}"

    def __call__(self, images: Sequence[np.ndarray]) -> np.ndarray:
        out = np.zeros((len(images), self.bins ** 3), dtype=np.float64)
        for i, img in enumerate(images):
            q = np.clip((np.asarray(img) * self.bins).astype(np.int64), 0, self.bins - 1).reshape(-1, 3)
            idx = (q[:, 0] * self.bins + q[:, 1]) * self.bins + q[:, 2]
            out[i] = np.bincount(idx, minlength=self.bins ** 3) / idx.size
        return out


class InceptionProvider:
    """ImageNet class probabilities from the torchvision Inception-v3 weights."""

    def __init__(self, device: str = "cpu", batch_size: int = 16):
        from torchvision.models import Inception_V3_Weights, inception_v3

        weights = Inception_V3_Weights.IMAGENET1K_V1
        self.identifier = f"torchvision:inception_v3:{weights.name}"
        self.device = torch.device(device)
        self.batch_size = batch_size
        self.model = inception_v3(weights=weights).eval().to(self.device)
        self.mean = torch.tensor([0.485, 0.456, 0.406], device=self.device).view(1, 3, 1, 1)
        self.std = torch.tensor([0.229, 0.224, 0.225], device=self.device).view(1, 3, 1, 1)

    @torch.no_grad()
    def __call__(self, images: Sequence[np.ndarray]) -> np.ndarray:
        out = []
        for i in range(0, len(images), self.batch_size):
            x = torch.from_numpy(np.stack([np.asarray(im).transpose(2, 0, 1) for im in images[i:i + self.batch_size]]))
            x = x.to(self.device, torch.float32)
            x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
            logits = self.model((x - self.mean) / self.std)
            out.append(torch.softmax(logits.double(), dim=1).cpu().numpy())
        return np.concatenate(out, axis=0)


def build_provider(cfg: MetricsConfig, device: str = "cpu") -> ProbabilityProvider:
    if cfg.is_provider == "color_histogram":
        return ColorHistogramProvider()
    return InceptionProvider(device=device)


def metric_digest(cfg: PipelineConfig, provider_id: str) -> str:
    return hashlib.sha256(f"{cfg.digest()}|{provider_id}".encode("utf-8")).hexdigest()


def evaluate_generator(
    generator: PoseTransferGenerator,
    pairs: Sequence[TrainingPair],
    cfg: PipelineConfig,
    provider: ProbabilityProvider,
    progress: bool = False,
) -> List[MetricReport]:
    """Reconstruct each target view from its source view and score the generated set."""
    pairs = list(pairs)[:cfg.metrics.max_pairs]
    if not pairs:
        raise ContractError("no evaluation pairs", field="--manifest")
    sigma = cfg.heatmap.sigma_px
    generated, ssims, ms_ssims = [], [], []
    for pair in tqdm(pairs, desc="evaluate", disable=not progress):
        out = generator_forward(generator, pair.source_image, encode_heatmaps(pair.source_pose, sigma), encode_heatmaps(pair.target_pose, sigma))
        generated.append(out)
        ssims.append(ssim(out, pair.target_image, cfg.metrics))
        ms_ssims.append(ms_ssim(out, pair.target_image, cfg.metrics))
    is_mean, is_std = inception_score(provider(generated), cfg.metrics.is_splits)

    digest = metric_digest(cfg, provider.identifier)
    n = len(pairs)
    reports = [
        MetricReport(metric="ssim", value=float(np.mean(ssims)), std=float(np.std(ssims)), sample_count=n, config_digest=digest),
        MetricReport(metric="ms_ssim", value=float(np.mean(ms_ssims)), std=float(np.std(ms_ssims)), sample_count=n, config_digest=digest),
        MetricReport(metric="inception_score", value=is_mean, std=is_std, sample_count=n, config_digest=digest),
    ]
    for r in reports:
        logger.info("Metric %s = %.4f over %d samples", r.metric, r.value, r.sample_count)
    return reports


# -----------------------
# Throughput
# -----------------------
TransferCall = Callable[[UserInput, str], Dict[str, float]]


def _request_plan(n_requests: int, mix: RequestMix, garment_ids: Sequence[str], n_users: int) -> List[Tuple[str, int]]:
    pool = list(mix.garment_ids or garment_ids)
    if not pool:
        raise ContractError("request mix has no garments", field="garment_ids")
    rng = np.random.default_rng(mix.seed)
    users = rng.integers(0, n_users, size=n_requests)
    # cycle through garments so every garment is hit before any repeats
    return [(pool[i % len(pool)], int(users[i])) for i in range(n_requests)]


def throughput_benchmark(
    run: TransferCall,
    n_requests: int,
    mix: RequestMix,
    users: Sequence[UserInput],
    garment_ids: Sequence[str] = (),
    concurrency: int = 1,
    trace_path: Optional[Union[str, Path]] = None,
    progress: bool = False,
) -> ThroughputStats:
    """
    Time ``n_requests`` end-to-end transfers.

    ``run`` performs one transfer and returns its per-stage seconds. Failed
    requests are recorded and left out of the timing; with ``concurrency`` 1
    the wall time is the sum of successful request durations.
    """
    if n_requests < 1:
        raise ContractError("n_requests must be >= 1", field="n_requests")
    if not users:
        raise ContractError("benchmark needs at least one user input", field="users")
    plan = _request_plan(n_requests, mix, garment_ids, len(users))

    def one(i: int) -> RequestTrace:
        garment_id, u = plan[i]
        started = time.perf_counter()
        try:
            stages = run(users[u], garment_id)
        except TryOnError as e:
            logger.warning("Benchmark request %d failed: %s", i, e.message)
            return RequestTrace(index=i, garment_id=garment_id, user_record=users[u].record_id, ok=False,
                                seconds=time.perf_counter() - started, error=e.code)
        except Exception as e:
            logger.exception("Benchmark request %d raised %s", i, type(e).__name__)
            return RequestTrace(index=i, garment_id=garment_id, user_record=users[u].record_id, ok=False,
                                seconds=time.perf_counter() - started, error=type(e).__name__)
        return RequestTrace(index=i, garment_id=garment_id, user_record=users[u].record_id, ok=True,
                            seconds=time.perf_counter() - started, stage_seconds=stages)

    started = time.perf_counter()
    if concurrency <= 1:
        traces = [one(i) for i in tqdm(range(n_requests), desc="bench", disable=not progress)]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            traces = list(pool.map(one, range(n_requests)))
    elapsed = time.perf_counter() - started

    ok = [t for t in traces if t.ok]
    failures = [t for t in traces if not t.ok]
    wall = sum(t.seconds for t in ok) if concurrency <= 1 else (elapsed if ok else 0.0)
    stage_seconds: Dict[str, float] = {}
    for t in ok:
        for name, sec in t.stage_seconds.items():
            stage_seconds[name] = stage_seconds.get(name, 0.0) + sec
    stage_total = sum(stage_seconds.values())
    shares = {k: (v / stage_total if stage_total > 0 else 0.0) for k, v in stage_seconds.items()}

    if trace_path is not None:
        Path(trace_path).parent.mkdir(parents=True, exist_ok=True)
        with open(trace_path, "w", encoding="utf-8") as f:
            for t in traces:
                f.write(t.model_dump_json() + "\n")

    stats = ThroughputStats(
        total_requests=n_requests,
        succeeded=len(ok),
        failed=len(failures),
        wall_time=wall,
        amortized_seconds=wall / len(ok) if ok else 0.0,
        stage_seconds=stage_seconds,
        stage_shares=shares,
        concurrency=concurrency,
        failures=failures,
    )
    logger.info("Benchmark: %d/%d ok, %.4fs amortized per request", stats.succeeded, n_requests, stats.amortized_seconds)
    return stats
