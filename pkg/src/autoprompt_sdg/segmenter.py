"""Desk-scale promptable segmenter.

A frozen convolutional image encoder exposes three projection taps (coarse to
fine), a frozen prompt encoder turns a box into a vector, and a trainable
decoder fuses them. Two decoders are available:

* ``IpefDecoder``: at every scale the prompt vector is tiled and concatenated
  with the image tap, refined by an SE-residual block, upsampled and joined
  with the next finer tap.
* ``PlainDecoder``: the prompt meets only the coarsest tap, followed by plain
  progressive upsampling (the no-fusion ablation).

Every stage also receives two fixed coordinate channels (normalized row/col of
each pixel center) so a tiled box vector can be compared with pixel positions.
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .agm import TrainingDivergenceError, _batch_indices, write_training_log
from .checkpoint import ModelCheckpoint, snapshot_state
from .data import preprocess, preprocess_mask
from .losses import combined_loss_from_logits, dice_score
from .prompts import BoundingBoxPrompt, jitter_prompt

log = logging.getLogger(__name__)

FROZEN_PREFIXES = ("image_encoder.", "prompt_encoder.")


class InvalidInputError(ValueError):
    pass


class SegmenterConfigError(ValueError):
    pass


@dataclass
class IpefConfig:
    enabled: bool = True
    se_reduction_ratio: int = 4
    upsample_mode: str = "bilinear"  # or "transposed"
    fused_channels: tuple = (256, 128, 64)
    skip_connections: bool = True

    def __post_init__(self):
        self.fused_channels = tuple(int(c) for c in self.fused_channels)
        if self.upsample_mode not in ("bilinear", "transposed"):
            raise SegmenterConfigError(f"unknown upsample_mode {self.upsample_mode!r}")
        if self.enabled:
            for c in self.fused_channels:
                if c % self.se_reduction_ratio:
                    raise SegmenterConfigError(
                        f"se_reduction_ratio {self.se_reduction_ratio} does not divide stage width {c}"
                    )


@dataclass
class SegmenterConfig:
    image_size: tuple = (128, 128)
    encoder_widths: tuple = (16, 32, 64, 128)
    tap_channels: tuple = (256, 128, 64)  # coarse -> fine
    prompt_frequencies: int = 8
    encoder_seed: int = 1234
    ipef: IpefConfig = field(default_factory=IpefConfig)

    def __post_init__(self):
        if isinstance(self.ipef, dict):
            self.ipef = IpefConfig(**self.ipef)
        self.image_size = tuple(int(s) for s in self.image_size)
        self.encoder_widths = tuple(int(c) for c in self.encoder_widths)
        self.tap_channels = tuple(int(c) for c in self.tap_channels)
        if len(self.encoder_widths) != 4 or len(self.tap_channels) != 3:
            raise SegmenterConfigError("need 4 encoder widths and 3 tap widths")
        if len(self.ipef.fused_channels) != 3:
            raise SegmenterConfigError("need 3 fused stage widths")
        for s in self.image_size:
            if s % 16:
                raise SegmenterConfigError(f"image size {self.image_size} must be divisible by 16")

    @property
    def coarse_size(self):
        return (self.image_size[0] // 16, self.image_size[1] // 16)

    @property
    def prompt_dim(self):
        return 4 + 4 * self.prompt_frequencies

    def to_dict(self):
        d = asdict(self)
        for k in ("image_size", "encoder_widths", "tap_channels"):
            d[k] = list(d[k])
        d["ipef"]["fused_channels"] = list(self.ipef.fused_channels)
        return d


def group_norm(c):
    return nn.GroupNorm(math.gcd(c, 8), c)


def coordinate_grid(h, w, dtype=torch.float32):
    """(2, h, w) normalized pixel-center coordinates in [-1, 1] (rows, cols)."""
    r = (torch.arange(h, dtype=dtype) + 0.5) / h * 2 - 1
    c = (torch.arange(w, dtype=dtype) + 0.5) / w * 2 - 1
    rr, cc = torch.meshgrid(r, c, indexing="ij")
    return torch.stack([rr, cc])


class ImageEncoder(nn.Module):
    """Strided conv stack; taps at /16, /8 and /4 through 1x1 projections."""

    def __init__(self, widths, tap_channels):
        super().__init__()
        w0, w1, w2, w3 = widths
        self.stem = nn.Conv2d(1, w0, 3, padding=1)
        self.down1 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)  # /2
        self.down2 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)  # /4
        self.down3 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)  # /8
        self.down4 = nn.Conv2d(w3, w3, 3, stride=2, padding=1)  # /16
        self.proj = nn.ModuleList(
            [nn.Conv2d(w3, tap_channels[0], 1), nn.Conv2d(w3, tap_channels[1], 1), nn.Conv2d(w2, tap_channels[2], 1)]
        )

    def forward(self, x):
        x = F.relu(self.stem(x))
        x = F.relu(self.down1(x))
        f4 = F.relu(self.down2(x))
        f8 = F.relu(self.down3(f4))
        f16 = F.relu(self.down4(f8))
        return [self.proj[0](f16), self.proj[1](f8), self.proj[2](f4)]


class PromptEncoder(nn.Module):
    """Box -> vector: normalized corners plus random Fourier features.

    Corner coordinates are normalized pixel edges, so the full-image box maps
    to (0, 0, 1, 1) for every image size and yields one fixed embedding.
    """

    def __init__(self, frequencies):
        super().__init__()
        self.gaussian = nn.Parameter(torch.randn(2, frequencies), requires_grad=False)
        self.corner_embed = nn.Parameter(0.1 * torch.randn(2, 2 * frequencies), requires_grad=False)

    def forward(self, corners):
        """``corners``: (B, 4) as (row0, col0, row1, col1) in [0, 1]."""
        pts = corners.view(-1, 2, 2)  # (B, corner, (row, col))
        proj = 2 * math.pi * ((2 * pts - 1) @ self.gaussian)
        fourier = torch.cat([proj.sin(), proj.cos()], dim=-1) + self.corner_embed
        return torch.cat([2 * corners - 1, fourier.flatten(1)], dim=1)


def normalized_corners(box, image_size):
    h, w = image_size
    return torch.tensor(
        [box.row_min / h, box.col_min / w, (box.row_max + 1) / h, (box.col_max + 1) / w], dtype=torch.float32
    )


class SEResBlock(nn.Module):
    def __init__(self, cin, cout, reduction=4):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = group_norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = group_norm(cout)
        self.fc1 = nn.Linear(cout, max(cout // reduction, 1))
        self.fc2 = nn.Linear(max(cout // reduction, 1), cout)
        self.shortcut = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()
        self.force_unit_gate = False

    def gate(self, y):
        if self.force_unit_gate:
            return torch.ones(y.shape[:2] + (1, 1), dtype=y.dtype)
        s = y.mean(dim=(2, 3))
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return s[:, :, None, None]

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(y * self.gate(y) + self.shortcut(x))


class PlainBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1), group_norm(cout), nn.ReLU(),
            nn.Conv2d(cout, cout, 3, padding=1), group_norm(cout), nn.ReLU(),
        )

    def forward(self, x):
        return self.body(x)


class Upsample(nn.Module):
    def __init__(self, cin, cout, mode):
        super().__init__()
        self.mode = mode
        if mode == "bilinear":
            self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        else:
            self.conv = nn.ConvTranspose2d(cin, cout, 2, stride=2)

    def forward(self, x):
        if self.mode == "bilinear":
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return F.relu(self.conv(x))


def _with_prompt(x, prompt):
    b, _, h, w = x.shape
    tiled = prompt[:, :, None, None].expand(b, prompt.shape[1], h, w)
    grid = coordinate_grid(h, w, x.dtype)[None].expand(b, 2, h, w)
    return torch.cat([x, tiled, grid], dim=1)


class IpefDecoder(nn.Module):
    def __init__(self, tap_channels, prompt_dim, ipef):
        super().__init__()
        self.skip_connections = ipef.skip_connections
        f = ipef.fused_channels
        extra = prompt_dim + 2
        self.blocks = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i in range(3):
            cin = (tap_channels[0] if i == 0 else f[i - 1]) + extra
            if i > 0 and self.skip_connections:
                cin += tap_channels[i]
            self.blocks.append(SEResBlock(cin, f[i], ipef.se_reduction_ratio))
            if i < 2:
                self.ups.append(Upsample(f[i], f[i], ipef.upsample_mode))

    def forward(self, taps, prompt):
        x = taps[0]
        for i in range(3):
            if i > 0:
                x = self.ups[i - 1](x)
                if self.skip_connections:
                    x = torch.cat([x, taps[i]], dim=1)
            x = self.blocks[i](_with_prompt(x, prompt))
        return x


class PlainDecoder(nn.Module):
    def __init__(self, tap_channels, prompt_dim, ipef):
        super().__init__()
        f = ipef.fused_channels
        self.blocks = nn.ModuleList(
            [PlainBlock(tap_channels[0] + prompt_dim + 2, f[0]), PlainBlock(f[0], f[1]), PlainBlock(f[1], f[2])]
        )
        self.ups = nn.ModuleList([Upsample(f[0], f[0], ipef.upsample_mode), Upsample(f[1], f[1], ipef.upsample_mode)])

    def forward(self, taps, prompt):
        x = self.blocks[0](_with_prompt(taps[0], prompt))
        x = self.blocks[1](self.ups[0](x))
        return self.blocks[2](self.ups[1](x))


class MaskHead(nn.Module):
    def __init__(self, cin):
        super().__init__()
        self.conv = nn.Conv2d(cin, max(cin // 2, 1), 3, padding=1)
        self.out = nn.Conv2d(max(cin // 2, 1), 1, 1)

    def forward(self, fused, target_size):
        logits = self.out(F.relu(self.conv(fused)))
        return F.interpolate(logits, size=tuple(target_size), mode="bilinear", align_corners=False)


class Segmenter(nn.Module):
    def __init__(self, cfg, seed=0):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg.encoder_widths, cfg.tap_channels)
        self.prompt_encoder = PromptEncoder(cfg.prompt_frequencies)
        decoder_cls = IpefDecoder if cfg.ipef.enabled else PlainDecoder
        self.decoder = decoder_cls(cfg.tap_channels, cfg.prompt_dim, cfg.ipef)
        self.head = MaskHead(cfg.ipef.fused_channels[-1])
        self._init(seed)
        self.freeze_encoders()

    def _init(self, seed):
        # Encoders depend only on encoder_seed so every decoder variant shares them.
        g = torch.Generator().manual_seed(self.cfg.encoder_seed)
        for m in self.image_encoder.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=g)
                nn.init.zeros_(m.bias)
        pe = self.prompt_encoder
        pe.gaussian.data.copy_(torch.randn(pe.gaussian.shape, generator=g))
        pe.corner_embed.data.copy_(0.1 * torch.randn(pe.corner_embed.shape, generator=g))
        g = torch.Generator().manual_seed(seed)
        for m in list(self.decoder.modules()) + list(self.head.modules()):
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), generator=g)
                nn.init.zeros_(m.bias)

    def freeze_encoders(self):
        for p in self.image_encoder.parameters():
            p.requires_grad_(False)
        for p in self.prompt_encoder.parameters():
            p.requires_grad_(False)

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith(FROZEN_PREFIXES)]

    def encode_image(self, images):
        if images.dim() != 4 or images.shape[1] != 1 or tuple(images.shape[2:]) != self.cfg.image_size:
            raise InvalidInputError(
                f"expected (B, 1, {self.cfg.image_size}) images, got {tuple(images.shape)}"
            )
        return self.image_encoder(images)

    def encode_prompt(self, boxes):
        """``boxes``: list of BoundingBoxPrompt in image-size pixel coordinates."""
        for b in boxes:
            if not b.within(self.cfg.image_size):
                raise InvalidInputError(f"box {b.as_tuple()} outside image {self.cfg.image_size}")
        corners = torch.stack([normalized_corners(b, self.cfg.image_size) for b in boxes])
        corners = corners.to(self.prompt_encoder.gaussian.dtype)
        return self.prompt_encoder(corners)

    def fuse(self, taps, prompt):
        expected = list(self.cfg.tap_channels)
        got = [t.shape[1] for t in taps]
        if got != expected:
            raise SegmenterConfigError(f"tap channels {got} do not match config {expected}")
        return self.decoder(taps, prompt)

    def decode(self, fused, target_size=None):
        return self.head(fused, target_size or self.cfg.image_size)

    def forward_from_taps(self, taps, prompt):
        return self.decode(self.fuse(taps, prompt))

    def forward(self, images, boxes):
        return self.forward_from_taps(self.encode_image(images), self.encode_prompt(boxes))


def build_segmenter(cfg, seed=0):
    return Segmenter(cfg, seed)


def segmenter_from_checkpoint(ckpt):
    if ckpt.kind != "segmenter":
        raise InvalidInputError(f"expected a segmenter checkpoint, got {ckpt.kind!r}")
    model = Segmenter(SegmenterConfig(**ckpt.config["segmenter"]), ckpt.seed)
    model.load_state_dict(ckpt.state_dict)
    model.eval()
    return model


def frozen_state(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items() if k.startswith(FROZEN_PREFIXES)}


def _prepare(model, images):
    size = model.cfg.image_size
    x = torch.from_numpy(np.stack([preprocess(im, size) for im in images])[:, None]).float()
    return x


def _box_to(box, src_shape, dst_shape):
    if tuple(src_shape) == tuple(dst_shape):
        return box
    return box.rescale(src_shape, dst_shape)


def encode_dataset(model, images, batch_size=16):
    """Frozen taps for a list of raw images (cached across fine-tuning steps)."""
    taps = [[], [], []]
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            out = model.encode_image(_prepare(model, images[s : s + batch_size]))
            for i in range(3):
                taps[i].append(out[i])
    return [torch.cat(t) for t in taps]


@dataclass
class PromptJitter:
    """Train-time prompt degradation: with ``probability``, a box is rescaled by
    a factor drawn uniformly from ``scale_range`` and shifted by up to
    ``shift_fraction`` of the image side."""

    probability: float = 0.0
    scale_range: tuple = (0.8, 1.5)
    shift_fraction: float = 0.1


def finetune_decoder(samples, boxes, model, opt, seed=0, log_path=None, jitter=None):
    """Train the decoder and head on (image, box, mask) triples; encoders stay frozen.

    ``boxes`` are given in each sample's own pixel coordinates.
    """
    if not samples:
        raise SegmenterConfigError("cannot fine-tune on an empty dataset")
    if len(boxes) != len(samples):
        raise SegmenterConfigError("need exactly one box per sample")
    torch.manual_seed(seed)
    size = model.cfg.image_size
    model.freeze_encoders()
    taps = encode_dataset(model, [s.image for s in samples])
    masks = torch.from_numpy(np.stack([preprocess_mask(s.mask, size) for s in samples])[:, None]).float()
    boxes = [_box_to(b, np.asarray(s.image).shape[:2], size) for b, s in zip(boxes, samples)]
    jitter = jitter or PromptJitter()
    rng = np.random.default_rng(seed)
    optimizer = torch.optim.Adam(
        model.trainable_parameters(), lr=opt.lr, betas=opt.betas, weight_decay=opt.weight_decay
    )
    history = []
    model.train()
    step = 0
    for step, idx in enumerate(_batch_indices(len(samples), opt, rng), start=1):
        idx = np.sort(idx)
        batch_boxes = []
        for i in idx:
            b = boxes[i]
            if jitter.probability > 0 and rng.random() < jitter.probability:
                scale = rng.uniform(*jitter.scale_range)
                shift = int(round(jitter.shift_fraction * min(size)))
                b = jitter_prompt(b, scale, shift, rng, size)
            batch_boxes.append(b)
        t_idx = torch.as_tensor(idx)
        logits = model.forward_from_taps([t[t_idx] for t in taps], model.encode_prompt(batch_boxes))
        y = masks[t_idx]
        loss = combined_loss_from_logits(logits, y, opt.ce_weight, opt.dice_weight)
        value = loss.total.item()
        if not math.isfinite(value):
            raise TrainingDivergenceError(step, value)
        optimizer.zero_grad(set_to_none=True)
        loss.total.backward()
        optimizer.step()
        history.append((step, value, dice_score((logits.detach() > 0).numpy(), y.numpy())))
    model.eval()
    if log_path is not None:
        write_training_log(log_path, history, loss_name="L_seg")
    config = {"segmenter": model.cfg.to_dict(), "optim": opt.to_dict()}
    return ModelCheckpoint("segmenter", snapshot_state(model), config, step, seed, {"history": history})


def segment_logits(model, images, boxes, batch_size=16):
    """Logits at each image's own resolution; ``boxes`` in image coordinates."""
    model.eval()
    size = model.cfg.image_size
    out = []
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            chunk = images[s : s + batch_size]
            bx = [_box_to(b, np.asarray(im).shape[:2], size) for b, im in zip(boxes[s : s + batch_size], chunk)]
            logits = model(_prepare(model, chunk), bx)
            for im, lg in zip(chunk, logits):
                hw = np.asarray(im).shape[:2]
                if tuple(hw) != tuple(size):
                    lg = F.interpolate(lg[None], size=tuple(hw), mode="bilinear", align_corners=False)[0]
                out.append(lg[0])
    return out


def segment(model, images, boxes, threshold=0.5):
    """Binary masks (uint8) for a list of images and their box prompts."""
    return [(torch.sigmoid(lg) > threshold).to(torch.uint8).numpy() for lg in segment_logits(model, images, boxes)]
