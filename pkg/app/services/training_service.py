import copy
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
from filelock import FileLock, Timeout
from tqdm import tqdm

from app.core.configs import PipelineConfig, TrainConfig
from app.core.exceptions import CheckpointError, ContractError, TrainingStepError
from app.helpers.preprocessor import heatmaps_to_tensor, image_to_tensor, seed_everything
from app.schemas import CheckpointRef, LossRecord, LossWeights, TextureTriplet, TrainingPair, WarpLossTerms
from app.services.checkpoint_service import CheckpointIO, check_architecture, read_meta
from app.services.loss_service import BatchOutputs, FeatureExtractor, gan_loss, total_objective, warp_loss
from app.services.pose_service import encode_heatmaps
from app.services.ptn_network import (
    DualDiscriminator,
    PoseTransferGenerator,
    TextureTranslationNet,
    build_discriminator,
    build_generator,
    build_texture_net,
)
from app.services.texture_service import texture_inputs

logger = logging.getLogger(__name__)

TRAIN_LOG = "train_log.jsonl"
LOCK_FILE = ".train.lock"


@dataclass
class TrainState:
    """Everything one training run mutates; exactly one writer at a time."""
    generator: PoseTransferGenerator
    discriminator: DualDiscriminator
    g_optimizer: torch.optim.Adam
    d_optimizer: torch.optim.Adam
    rng: torch.Generator
    sigma_px: float
    lr: float
    epoch: int = 0
    step: int = 0
    history: List[LossRecord] = field(default_factory=list)
    lr_history: List[float] = field(default_factory=list)

    @property
    def device(self) -> torch.device:
        return next(self.generator.parameters()).device


def loss_weights(cfg: PipelineConfig) -> LossWeights:
    return LossWeights(
        alpha=cfg.train.alpha,
        rho=cfg.loss.rho,
        l1_weight=cfg.loss.l1_weight,
        perceptual_weight=cfg.loss.perceptual_weight,
    )


def make_optimizer(params, train: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=train.lr_initial, betas=(train.adam_beta1, train.adam_beta2))


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def new_state(
    generator: PoseTransferGenerator,
    discriminator: DualDiscriminator,
    cfg: PipelineConfig,
    rng: Optional[torch.Generator] = None,
) -> TrainState:
    return TrainState(
        generator=generator,
        discriminator=discriminator,
        g_optimizer=make_optimizer(generator.parameters(), cfg.train),
        d_optimizer=make_optimizer(discriminator.parameters(), cfg.train),
        rng=rng if rng is not None else seed_everything(cfg.train.seed),
        sigma_px=cfg.heatmap.sigma_px,
        lr=cfg.train.lr_initial,
    )


def lr_at(epoch: int, total_epochs: int, lr_initial: float, schedule: str = "linear_after_half") -> float:
    """
    Learning rate for a 0-based epoch; a pure function of its arguments.

    ``linear_after_half`` holds lr_initial for the first half of the epochs and
    then decays linearly towards 0 without reaching it.
    """
    if total_epochs < 1:
        raise ContractError("total_epochs must be >= 1", field="train.epochs")
    if schedule == "constant":
        return lr_initial
    if schedule == "linear":
        return lr_initial * (1.0 - epoch / (total_epochs + 1))
    if schedule == "linear_after_half":
        half = total_epochs // 2
        return lr_initial * (1.0 - max(0, epoch + 1 - half) / (total_epochs - half + 1))
    raise ContractError(f"unknown decay schedule {schedule!r}", field="train.decay_schedule")


def collate(batch: Sequence[TrainingPair], sigma_px: float, device: torch.device, dtype: torch.dtype = torch.float32) -> Dict[str, torch.Tensor]:
    if not batch:
        raise ContractError("empty training batch", field="batch")

    def stack(tensors: List[torch.Tensor]) -> torch.Tensor:
        return torch.cat(tensors, dim=0).to(device)

    return {
        "source_image": stack([image_to_tensor(p.source_image, dtype) for p in batch]),
        "target_image": stack([image_to_tensor(p.target_image, dtype) for p in batch]),
        "source_pose": stack([heatmaps_to_tensor(encode_heatmaps(p.source_pose, sigma_px).channels, dtype) for p in batch]),
        "target_pose": stack([heatmaps_to_tensor(encode_heatmaps(p.target_pose, sigma_px).channels, dtype) for p in batch]),
    }


def _snapshot(state: TrainState) -> Dict[str, Any]:
    return {
        "generator": copy.deepcopy(state.generator.state_dict()),
        "discriminator": copy.deepcopy(state.discriminator.state_dict()),
        "g_optimizer": copy.deepcopy(state.g_optimizer.state_dict()),
        "d_optimizer": copy.deepcopy(state.d_optimizer.state_dict()),
    }


def _restore(state: TrainState, snap: Dict[str, Any]) -> None:
    state.generator.load_state_dict(snap["generator"])
    state.discriminator.load_state_dict(snap["discriminator"])
    state.g_optimizer.load_state_dict(snap["g_optimizer"])
    state.d_optimizer.load_state_dict(snap["d_optimizer"])


def training_step(
    state: TrainState,
    batch: Sequence[TrainingPair],
    weights: LossWeights,
    feature_extractor: Optional[FeatureExtractor] = None,
) -> Tuple[TrainState, LossRecord]:
    """
    One discriminator update followed by one generator update.

    A non-finite loss aborts the step: parameters and optimizer moments are
    restored and the returned record carries ``ok=False`` with a diagnostic.
    """
    started = time.perf_counter()
    G, D = state.generator, state.discriminator
    dtype = next(G.parameters()).dtype
    x = collate(batch, state.sigma_px, state.device, dtype)
    src_img, tgt_img, src_pose, tgt_pose = x["source_image"], x["target_image"], x["source_pose"], x["target_pose"]
    set_lr(state.g_optimizer, state.lr)
    set_lr(state.d_optimizer, state.lr)
    G.train()
    D.train()
    snap = _snapshot(state)

    try:
        # discriminators
        fake = G(src_img, src_pose, tgt_pose)
        d_a_real = D("appearance", src_img, tgt_img)
        d_s_real = D("shape", tgt_pose, tgt_img)
        d_loss = -gan_loss(
            d_a_real, d_s_real,
            D("appearance", src_img, fake.detach()), D("shape", tgt_pose, fake.detach()),
            weights.rho,
        )
        if not torch.isfinite(d_loss):
            raise TrainingStepError(f"non-finite discriminator_loss: {d_loss.item()}", field="discriminator_loss")
        state.d_optimizer.zero_grad(set_to_none=True)
        d_loss.backward()
        state.d_optimizer.step()

        # generator
        outputs = BatchOutputs(
            generated=fake,
            target=tgt_img,
            d_a_real=d_a_real.detach(),
            d_s_real=d_s_real.detach(),
            d_a_fake=D("appearance", src_img, fake),
            d_s_fake=D("shape", tgt_pose, fake),
        )
        g_loss, _ = total_objective(outputs, weights, feature_extractor)
        state.g_optimizer.zero_grad(set_to_none=True)
        g_loss.backward()
        state.g_optimizer.step()
    except TrainingStepError as e:
        _restore(state, snap)
        logger.warning("Training step %d aborted: %s", state.step, e.message)
        record = LossRecord(
            step=state.step,
            epoch=state.epoch,
            lr=state.lr,
            generator_loss=float("nan"),
            discriminator_loss=float("nan"),
            l1_loss=float("nan"),
            wall_time=time.perf_counter() - started,
            ok=False,
            diagnostic=e.message,
        )
        state.history.append(record)
        return state, record

    record = LossRecord(
        step=state.step,
        epoch=state.epoch,
        lr=state.lr,
        generator_loss=float(g_loss.item()),
        discriminator_loss=float(d_loss.item()),
        l1_loss=float((fake.detach() - tgt_img).abs().mean().item()),
        wall_time=time.perf_counter() - started,
    )
    state.step += 1
    state.history.append(record)
    return state, record


def reconstruction_l1(generator: PoseTransferGenerator, pairs: Sequence[TrainingPair], sigma_px: float, batch_size: int = 8) -> float:
    """Mean absolute error between generated and target views, in the network's [-1, 1] range."""
    if not pairs:
        raise ContractError("no pairs to evaluate", field="pairs")
    param = next(generator.parameters())
    was_training = generator.training
    generator.eval()
    total, count = 0.0, 0
    try:
        with torch.no_grad():
            for i in range(0, len(pairs), batch_size):
                x = collate(pairs[i:i + batch_size], sigma_px, param.device, param.dtype)
                fake = generator(x["source_image"], x["source_pose"], x["target_pose"])
                total += float((fake - x["target_image"]).abs().sum().item())
                count += fake.numel()
    finally:
        generator.train(was_training)
    return total / count


# -----------------------
# Phase orchestration
# -----------------------
def _batches(n: int, batch_size: int, rng: torch.Generator) -> List[List[int]]:
    order = torch.randperm(n, generator=rng).tolist()
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _append_log(path: Path, record: LossRecord) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(record.model_dump_json() + "\n")


def _train_lock(out_dir: Path) -> FileLock:
    out_dir.mkdir(parents=True, exist_ok=True)
    return FileLock(str(out_dir / LOCK_FILE), timeout=0)


def _acquire(lock: FileLock, out_dir: Path) -> None:
    try:
        lock.acquire()
    except Timeout:
        raise CheckpointError(f"training output directory {out_dir} is locked by another run", field="--out")


def _phase_meta(phase: str, state: TrainState, cfg: PipelineConfig, parent_hash: Optional[str] = None) -> Dict[str, Any]:
    return {
        "phase": phase,
        "epoch": state.epoch,
        "step": state.step,
        "architecture": {**state.generator.architecture(), **state.discriminator.architecture()},
        "loss_weights": loss_weights(cfg).model_dump(),
        "parent_hash": parent_hash,
        "config_digest": cfg.digest(),
        "seed": cfg.train.seed,
        "lr_history": list(state.lr_history),
    }


def save_state(ckpt: CheckpointIO, name: str, phase: str, state: TrainState, cfg: PipelineConfig, parent_hash: Optional[str] = None) -> CheckpointRef:
    return ckpt.save(
        name,
        _phase_meta(phase, state, cfg, parent_hash),
        optimizers={"generator": state.g_optimizer, "discriminator": state.d_optimizer},
        extra={"rng_state": state.rng.get_state()},
    )


def run_epochs(
    state: TrainState,
    dataset: Sequence[TrainingPair],
    n_epochs: int,
    cfg: PipelineConfig,
    ckpt: CheckpointIO,
    phase: str,
    log_path: Optional[Path] = None,
    parent_hash: Optional[str] = None,
    progress: bool = False,
) -> CheckpointRef:
    weights = loss_weights(cfg)
    train = cfg.train
    for epoch in tqdm(range(n_epochs), desc=f"train-{phase}", disable=not progress):
        state.epoch = epoch
        state.lr = lr_at(epoch, n_epochs, train.lr_initial, train.decay_schedule)
        state.lr_history.append(state.lr)
        for idx in _batches(len(dataset), train.batch_size, state.rng):
            _, record = training_step(state, [dataset[i] for i in idx], weights)
            if log_path is not None:
                _append_log(log_path, record)
        state.epoch = epoch + 1
        last = state.history[-1] if state.history else None
        logger.info(
            "Phase %s epoch %d/%d lr=%.6g g=%.4f d=%.4f l1=%.4f",
            phase, epoch + 1, n_epochs, state.lr,
            last.generator_loss if last else float("nan"),
            last.discriminator_loss if last else float("nan"),
            last.l1_loss if last else float("nan"),
        )
        if (epoch + 1) % train.checkpoint_every == 0 and epoch + 1 < n_epochs:
            save_state(ckpt, f"{phase}_epoch{epoch + 1:04d}", phase, state, cfg, parent_hash)
    return save_state(ckpt, f"{phase}_final", phase, state, cfg, parent_hash)


def _capped(dataset: Sequence[Any], train: TrainConfig) -> List[Any]:
    items = list(dataset)
    return items[:train.max_pairs] if train.max_pairs else items


def train_general(
    dataset: Sequence[TrainingPair],
    cfg: PipelineConfig,
    out_dir: Union[str, Path],
    progress: bool = False,
) -> CheckpointRef:
    """General pose-transfer training from scratch; final checkpoint has phase ``general``."""
    pairs = _capped(dataset, cfg.train)
    if not pairs:
        raise ContractError("training dataset is empty", field="dataset")
    out_dir = Path(out_dir)
    lock = _train_lock(out_dir)
    _acquire(lock, out_dir)
    try:
        rng = seed_everything(cfg.train.seed)
        device = torch.device(cfg.train.device)
        G = build_generator(cfg.network).to(device)
        D = build_discriminator(cfg.network).to(device)
        state = new_state(G, D, cfg, rng)
        ckpt = CheckpointIO(out_dir, generator=G, discriminator=D)
        logger.info("General training on %d pairs for %d epochs into %s", len(pairs), cfg.train.epochs_general, out_dir)
        return run_epochs(state, pairs, cfg.train.epochs_general, cfg, ckpt, "general", out_dir / TRAIN_LOG, progress=progress)
    finally:
        lock.release()


def train_specialized(
    base: Union[str, Path],
    garment_pairs: Sequence[TrainingPair],
    cfg: PipelineConfig,
    out_dir: Union[str, Path],
    progress: bool = False,
) -> CheckpointRef:
    """
    Fine-tune a general checkpoint on the garment collection.

    Starts from the base weights with fresh optimizers; the output records the
    base content hash as its parent.
    """
    pairs = _capped(garment_pairs, cfg.train)
    if not pairs:
        raise ContractError("garment collection has no training pairs", field="garment_pairs")
    base_meta = read_meta(base)
    device = torch.device(cfg.train.device)
    G = build_generator(cfg.network).to(device)
    D = build_discriminator(cfg.network).to(device)
    check_architecture(base_meta, {**G.architecture(), **D.architecture()})

    out_dir = Path(out_dir)
    lock = _train_lock(out_dir)
    _acquire(lock, out_dir)
    try:
        rng = seed_everything(cfg.train.seed)
        ckpt = CheckpointIO(out_dir, generator=G, discriminator=D)
        ckpt.load(base, device=str(device))
        state = new_state(G, D, cfg, rng)
        logger.info(
            "Specialized training from %s (hash %s) on %d pairs for %d epochs",
            base, base_meta.content_hash[:12], len(pairs), cfg.train.epochs_specialized,
        )
        if cfg.train.epochs_specialized == 0:
            return save_state(ckpt, "specialized_final", "specialized", state, cfg, base_meta.content_hash)
        return run_epochs(
            state, pairs, cfg.train.epochs_specialized, cfg, ckpt, "specialized",
            out_dir / TRAIN_LOG, parent_hash=base_meta.content_hash, progress=progress,
        )
    finally:
        lock.release()


# -----------------------
# Texture translation
# -----------------------
def texture_step(
    net: TextureTranslationNet,
    optimizer: torch.optim.Optimizer,
    batch: Sequence[TextureTriplet],
    lambdas: Tuple[float, float, float],
    feature_extractor: Optional[FeatureExtractor] = None,
) -> Tuple[float, float]:
    """One update of the texture network on the warp loss; returns (loss, refined-vs-ground-truth L1)."""
    param = next(net.parameters())
    garments, users, masks, gts = [], [], [], []
    for t in batch:
        g, u, m = texture_inputs(t.posed_model, t.user, t.user_mask, param.dtype)
        garments.append(g)
        users.append(u)
        masks.append(m)
        gts.append(image_to_tensor(t.ground_truth, param.dtype))
    garment, user, mask = (torch.cat(x).to(param.device) for x in (garments, users, masks))
    gt = torch.cat(gts).to(param.device)

    net.train()
    coarse, refined = net.forward_stages(garment, user, mask)
    loss = warp_loss(WarpLossTerms(I_gt=gt, I_stn_0=coarse, I_stn_1=refined, lambdas=lambdas), feature_extractor)
    if not torch.isfinite(loss):
        raise TrainingStepError(f"non-finite warp loss: {loss.item()}", field="warp_loss")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.item()), float((refined.detach() - gt).abs().mean().item())


def train_texture_translation(
    triplets: Sequence[TextureTriplet],
    cfg: PipelineConfig,
    out_dir: Union[str, Path],
    progress: bool = False,
) -> CheckpointRef:
    """Trains the texture network on its own, separately from the pose-transfer network."""
    items = _capped(triplets, cfg.train)
    if not items:
        raise ContractError("no texture triplets to train on", field="triplets")
    if cfg.train.epochs_texture < 1:
        raise ContractError("train.epochs_texture must be >= 1 to train the texture network", field="train.epochs_texture")
    out_dir = Path(out_dir)
    lock = _train_lock(out_dir)
    _acquire(lock, out_dir)
    try:
        rng = seed_everything(cfg.train.seed)
        device = torch.device(cfg.train.device)
        net = build_texture_net(cfg.network).to(device)
        optimizer = make_optimizer(net.parameters(), cfg.train)
        ckpt = CheckpointIO(out_dir, texture_net=net)
        lambdas = (cfg.train.lambda1, cfg.train.lambda2, cfg.texture.lambda3)
        n_epochs, step = cfg.train.epochs_texture, 0
        lr_history: List[float] = []
        log_path = out_dir / TRAIN_LOG

        for epoch in tqdm(range(n_epochs), desc="train-texture", disable=not progress):
            lr = lr_at(epoch, n_epochs, cfg.train.lr_initial, cfg.train.decay_schedule)
            lr_history.append(lr)
            set_lr(optimizer, lr)
            for idx in _batches(len(items), cfg.train.batch_size, rng):
                started = time.perf_counter()
                loss, l1 = texture_step(net, optimizer, [items[i] for i in idx], lambdas)
                _append_log(log_path, LossRecord(
                    step=step, epoch=epoch, lr=lr, generator_loss=loss, discriminator_loss=0.0,
                    l1_loss=l1, wall_time=time.perf_counter() - started,
                ))
                step += 1
            logger.info("Phase texture epoch %d/%d lr=%.6g warp=%.4f", epoch + 1, n_epochs, lr, loss)

        return ckpt.save(
            "texture_final",
            {
                "phase": "texture",
                "epoch": n_epochs,
                "step": step,
                "architecture": net.architecture(),
                "loss_weights": {"lambda1": lambdas[0], "lambda2": lambdas[1], "lambda3": lambdas[2]},
                "config_digest": cfg.digest(),
                "seed": cfg.train.seed,
                "rho_placement": "not_applicable",
                "lr_history": lr_history,
            },
            optimizers={"texture_net": optimizer},
        )
    finally:
        lock.release()
