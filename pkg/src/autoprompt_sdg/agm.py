"""Prompt-generating segmentation branch: a compact U-Net with SUFM slots.

SUFM insertion slots are named ``block{i}`` (after encoder block ``i``, before
its pooling) and ``pool{i}`` (after the max-pool that follows block ``i``).
An integer ``i`` is shorthand for ``block{i}``.
"""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import ModelCheckpoint, snapshot_state
from .data import preprocess, preprocess_mask
from .losses import combined_loss_from_logits, dice_score
from .sufm import SufmConfig, sufm_forward

log = logging.getLogger(__name__)

# Column labels of the insertion-position ablation -> slot sets.
POSITION_GROUPS = {
    "0-1": ("block0", "pool0"),
    "2": ("block1",),
    "3": ("block2",),
    "4": ("block3",),
    "5": ("block4",),
}


class AgmConfigError(ValueError):
    pass


class InvalidInputError(ValueError):
    pass


class TrainingDivergenceError(RuntimeError):
    def __init__(self, iteration, loss):
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


def normalize_slot(slot):
    if isinstance(slot, (int, np.integer)):
        return f"block{int(slot)}"
    slot = str(slot)
    if slot.isdigit():
        return f"block{slot}"
    return slot


@dataclass
class AgmConfig:
    encoder_channels: tuple = (16, 32, 64, 128)
    sufm_positions: tuple = ("block0", "pool0")
    input_size: tuple = (64, 64)
    num_classes: int = 1
    sufm: SufmConfig = field(default_factory=SufmConfig)

    def __post_init__(self):
        if isinstance(self.sufm, dict):
            self.sufm = SufmConfig(**self.sufm)
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.input_size = tuple(int(s) for s in self.input_size)
        self.sufm_positions = tuple(sorted({normalize_slot(s) for s in self.sufm_positions}))
        self.validate()

    @property
    def valid_slots(self):
        n = len(self.encoder_channels)
        return [f"block{i}" for i in range(n)] + [f"pool{i}" for i in range(n - 1)]

    @property
    def downsample_factor(self):
        return 2 ** (len(self.encoder_channels) - 1)

    def validate(self):
        if self.num_classes != 1:
            raise AgmConfigError("only binary segmentation (num_classes=1) is supported")
        if len(self.encoder_channels) < 2:
            raise AgmConfigError("need at least two encoder blocks")
        bad = [s for s in self.sufm_positions if s not in self.valid_slots]
        if bad:
            raise AgmConfigError(f"invalid SUFM slots {bad}; valid: {self.valid_slots}")
        for s in self.input_size:
            if s % self.downsample_factor:
                raise AgmConfigError(f"input size {self.input_size} not divisible by {self.downsample_factor}")

    def to_dict(self):
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["sufm_positions"] = list(self.sufm_positions)
        d["input_size"] = list(self.input_size)
        return d


@dataclass
class OptimConfig:
    lr: float = 1e-3
    batch_size: int = 8
    iterations: int = 300
    iteration_unit: str = "steps"  # "steps" or "epochs"
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    ce_weight: float = 1.0
    dice_weight: float = 1.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.iteration_unit not in ("steps", "epochs"):
            raise AgmConfigError("iteration_unit must be 'steps' or 'epochs'")
        if self.batch_size < 1 or self.iterations < 0 or self.lr < 0:
            raise AgmConfigError("batch_size >= 1, iterations >= 0 and lr >= 0 are required")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def group_norm(c):
    # batch-independent, so train and eval forwards agree when SUFM is idle
    return nn.GroupNorm(math.gcd(c, 8), c)


def conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        group_norm(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        group_norm(cout),
        nn.ReLU(inplace=True),
    )


def init_weights(module, generator):
    """Fan-in uniform init for convolutions, zero bias, drawn from ``generator``."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class AgmNet(nn.Module):
    def __init__(self, cfg, seed=0):
        super().__init__()
        self.cfg = cfg
        ch = cfg.encoder_channels
        self.enc = nn.ModuleList(conv_block(cin, cout) for cin, cout in zip((1,) + ch[:-1], ch))
        self.up = nn.ModuleList(nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2) for i in range(len(ch) - 1))
        self.dec = nn.ModuleList(conv_block(2 * ch[i], ch[i]) for i in range(len(ch) - 1))
        self.head = nn.Conv2d(ch[0], cfg.num_classes, 1)
        init_weights(self, torch.Generator().manual_seed(seed))
        self.sufm_generator = torch.Generator().manual_seed(cfg.sufm.rng_seed)

    def _maybe_sufm(self, x, slot, generator):
        if slot in self.cfg.sufm_positions:
            return sufm_forward(x, self.cfg.sufm, generator, self.training)
        return x

    def forward(self, x, generator=None):
        if x.dim() != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != self.cfg.input_size:
            raise InvalidInputError(f"expected (B, 1, {self.cfg.input_size}) input, got {tuple(x.shape)}")
        g = generator if generator is not None else self.sufm_generator
        skips = []
        last = len(self.enc) - 1
        for i, block in enumerate(self.enc):
            x = self._maybe_sufm(block(x), f"block{i}", g)
            if i < last:
                skips.append(x)
                x = self._maybe_sufm(F.max_pool2d(x, 2), f"pool{i}", g)
        for i in reversed(range(last)):
            x = self.up[i](x)
            x = self.dec[i](torch.cat([x, skips[i]], dim=1))
        return self.head(x)


def build_agm(cfg, seed=0):
    return AgmNet(cfg, seed)


def agm_from_checkpoint(ckpt):
    if ckpt.kind != "agm":
        raise InvalidInputError(f"expected an agm checkpoint, got {ckpt.kind!r}")
    cfg = AgmConfig(**ckpt.config["agm"])
    model = AgmNet(cfg, ckpt.seed)
    model.load_state_dict(ckpt.state_dict)
    model.eval()
    return model


def agm_forward(image, model, mode="eval", generator=None):
    """Logits for a preprocessed (B, 1, H, W) batch."""
    model.train(mode == "train")
    if mode == "train":
        return model(image, generator)
    with torch.no_grad():
        return model(image, generator)


def _stack(samples, size):
    images = np.stack([preprocess(s.image, size) for s in samples])[:, None]
    masks = np.stack([preprocess_mask(s.mask, size) for s in samples])[:, None]
    return torch.from_numpy(images).float(), torch.from_numpy(masks).float()


def _batch_indices(n, opt, rng):
    """Yields index batches. 'steps' counts optimizer steps; 'epochs' counts
    full passes over the data (the last partial batch is kept)."""
    if opt.iteration_unit == "epochs":
        for _ in range(opt.iterations):
            order = rng.permutation(n)
            for s in range(0, n, opt.batch_size):
                yield order[s : s + opt.batch_size]
        return
    order, pos = rng.permutation(n), 0
    for _ in range(opt.iterations):
        if pos + opt.batch_size > n:
            order, pos = rng.permutation(n), 0
        batch = order[pos : pos + opt.batch_size]
        pos += opt.batch_size
        yield batch


def train_agm(samples, cfg, opt, seed=0, log_path=None, model=None):
    """Supervised source-domain training. Returns a ModelCheckpoint.

    Logs one row per optimizer step: iteration, L_sup, batch Dice.
    """
    if not samples:
        raise AgmConfigError("cannot train on an empty dataset")
    for s in samples:
        m = np.asarray(s.mask)
        if not np.isin(m, (0, 1)).all():
            raise AgmConfigError(f"sample {s.sample_id}: mask is not binary")
    torch.manual_seed(seed)
    images, masks = _stack(samples, cfg.input_size)
    if model is None:
        model = AgmNet(cfg, seed)
    model.sufm_generator.manual_seed(cfg.sufm.rng_seed + seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=opt.lr, betas=opt.betas, weight_decay=opt.weight_decay)
    rng = np.random.default_rng(seed)
    history = []
    model.train()
    step = 0
    for step, idx in enumerate(_batch_indices(len(samples), opt, rng), start=1):
        idx = torch.as_tensor(np.sort(idx))
        x, y = images[idx], masks[idx]
        logits = model(x)
        loss = combined_loss_from_logits(logits, y, opt.ce_weight, opt.dice_weight)
        value = loss.total.item()
        if not math.isfinite(value):
            raise TrainingDivergenceError(step, value)
        optimizer.zero_grad(set_to_none=True)
        loss.total.backward()
        optimizer.step()
        pred = (logits.detach() > 0).numpy()
        history.append((step, value, dice_score(pred, y.numpy())))
    if log_path is not None:
        write_training_log(log_path, history)
    model.eval()
    config = {"agm": cfg.to_dict(), "optim": opt.to_dict()}
    return ModelCheckpoint("agm", snapshot_state(model), config, step, seed, {"history": history})


def write_training_log(path, history, loss_name="L_sup"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", loss_name, "dice"])
        for it, loss, dice in history:
            w.writerow([it, f"{loss:.8f}", f"{dice:.6f}"])
    return path


def predict_logits(model, images, batch_size=16):
    """Eval-mode logits at the AGM input size for a list of raw images."""
    model.eval()
    size = model.cfg.input_size
    out = []
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            x = torch.from_numpy(np.stack([preprocess(im, size) for im in images[s : s + batch_size]])[:, None])
            out.append(model(x.float()))
    return torch.cat(out) if out else torch.empty(0, 1, *size)


def predict_mask(logits, threshold=0.5):
    """Binary mask: 1 iff sigmoid(logit) > threshold (0.5 exactly is background)."""
    logits = torch.as_tensor(logits)
    return (torch.sigmoid(logits) > threshold).to(torch.uint8)


def predict_full_masks(model, images, threshold=0.5):
    """Predict at the AGM resolution and bring each mask back to its image's size."""
    logits = predict_logits(model, images)
    masks = []
    for im, lg in zip(images, logits):
        h, w = np.asarray(im).shape[:2]
        up = F.interpolate(lg[None], size=(h, w), mode="bilinear", align_corners=False)[0, 0]
        masks.append(predict_mask(up, threshold).numpy())
    return masks
