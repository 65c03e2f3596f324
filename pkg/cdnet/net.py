"""
Temporal U-Net for change detection.

Every date goes through the same encoder. A convolutional LSTM at each encoder
level folds the per-date features into a temporal summary, and the decoder
combines those summaries level by level through skip connections. The plain
variant stacks all dates along the channel axis and runs a standard U-Net.

State-dict key scheme:
    encoder.blocks.<l>.conv.weight / .bias, encoder.blocks.<l>.bn.*   level l = 0..levels-1
    temporal.<l>.input_conv.weight / .bias                             W_x for gates (i, f, o, g)
    temporal.<l>.hidden_conv.weight                                    W_h for gates (i, f, o, g)
    decoder.blocks.<j>.conv.*, decoder.blocks.<j>.bn.*                 j = 0 is the bottleneck block
    head.weight / head.bias                                            1x1 classifier
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from cdnet.errors import NetError

logger = logging.getLogger(__name__)

VARIANTS = ('unet_lstm', 'unet_plain')


@dataclass
class NetConfig:
    in_channels: int = 4
    base_depth: int = 16
    levels: int = 5
    num_classes: int = 2
    variant: str = 'unet_lstm'
    num_dates: int = 2
    kernel_size: int = 3

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise NetError(f"variant must be one of {VARIANTS}, got {self.variant}")
        if self.levels < 2:
            raise NetError(f"levels must be >= 2, got {self.levels}")
        if self.base_depth < 1:
            raise NetError(f"base_depth must be >= 1, got {self.base_depth}")
        if self.num_classes < 2:
            raise NetError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            raise NetError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_dates < 2:
            raise NetError(f"num_dates must be >= 2, got {self.num_dates}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise NetError(f"kernel_size must be odd and positive, got {self.kernel_size}")

    @property
    def depths(self) -> List[int]:
        return [self.base_depth * 2 ** level for level in range(self.levels)]

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self):
        return asdict(self)


class ConvLSTMState(NamedTuple):
    hidden: torch.Tensor
    cell: torch.Tensor


class ConvBlock(nn.Module):
    """conv-BN-ReLU, 3x3 with stride and padding 1"""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride=1, padding=1)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class ConvLSTMCell(nn.Module):
    """
    LSTM cell whose input-to-state and state-to-state transforms are
    same-padded convolutions. Gate order along the channel axis: i, f, o, g.
    """

    def __init__(self, input_size: int, hidden_size: int, kernel_size: int = 3):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        padding = kernel_size // 2
        self.input_conv = nn.Conv2d(input_size, 4 * hidden_size, kernel_size, padding=padding)
        self.hidden_conv = nn.Conv2d(hidden_size, 4 * hidden_size, kernel_size, padding=padding, bias=False)

    def init_state(self, x: torch.Tensor) -> ConvLSTMState:
        shape = (x.shape[0], self.hidden_size, x.shape[2], x.shape[3])
        zeros = x.new_zeros(shape)
        return ConvLSTMState(zeros, zeros.clone())

    def forward(self, x: torch.Tensor, state: Optional[ConvLSTMState] = None) -> ConvLSTMState:
        if state is None:
            state = self.init_state(x)
        if x.shape[1] != self.input_size or state.hidden.shape[1] != self.hidden_size:
            raise NetError(f"ConvLSTM expects {self.input_size} input / {self.hidden_size} hidden channels, "
                           f"got {x.shape[1]} / {state.hidden.shape[1]}")
        if x.shape[2:] != state.hidden.shape[2:]:
            raise NetError(f"ConvLSTM input {tuple(x.shape[2:])} and state {tuple(state.hidden.shape[2:])} differ spatially")

        gates = self.input_conv(x) + self.hidden_conv(state.hidden)
        in_gate, forget_gate, out_gate, cell_gate = gates.chunk(4, dim=1)
        in_gate = torch.sigmoid(in_gate)
        forget_gate = torch.sigmoid(forget_gate)
        out_gate = torch.sigmoid(out_gate)
        cell_gate = torch.tanh(cell_gate)

        cell = forget_gate * state.cell + in_gate * cell_gate
        hidden = out_gate * torch.tanh(cell)
        return ConvLSTMState(hidden, cell)


def convlstm_step(cell: ConvLSTMCell, x: torch.Tensor, state: ConvLSTMState) -> ConvLSTMState:
    """One recurrent update; accepts unbatched (D, H, W) or batched (N, D, H, W) tensors"""
    if x.dim() == 3:
        out = cell(x.unsqueeze(0), ConvLSTMState(state.hidden.unsqueeze(0), state.cell.unsqueeze(0)))
        return ConvLSTMState(out.hidden.squeeze(0), out.cell.squeeze(0))
    return cell(x, state)


class Encoder(nn.Module):
    """Level 0 keeps the input size; every later level convolves then max-pools 2x2"""

    def __init__(self, in_channels: int, depths: Sequence[int]):
        super().__init__()
        channels = [in_channels] + list(depths)
        self.blocks = nn.ModuleList(ConvBlock(channels[i], channels[i + 1]) for i in range(len(depths)))

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        features = []
        for level, block in enumerate(self.blocks):
            x = block(x)
            if level > 0:
                x = F.max_pool2d(x, 2)
            features.append(x)
        return features


class Decoder(nn.Module):
    """
    Block 0 refines the deepest skip. Each later block upsamples 2x2 (nearest),
    concatenates the symmetric skip and applies conv-BN-ReLU.
    """

    def __init__(self, depths: Sequence[int]):
        super().__init__()
        depths = list(depths)
        blocks = [ConvBlock(depths[-1], depths[-1])]
        for level in range(len(depths) - 2, -1, -1):
            blocks.append(ConvBlock(depths[level + 1] + depths[level], depths[level]))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, skips: Sequence[torch.Tensor]) -> torch.Tensor:
        x = self.blocks[0](skips[-1])
        for block, skip in zip(self.blocks[1:], reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode='nearest')
            x = block(torch.cat([x, skip], dim=1))
        return x


class ChangeNet(nn.Module):
    """Shared interface: input (N, T, C, H, W), output per-class logits (N, K, H, W)"""

    def __init__(self, config: NetConfig):
        super().__init__()
        config.validate()
        self.config = config

    def check_input(self, x: torch.Tensor) -> None:
        cfg = self.config
        if x.dim() != 5:
            raise NetError(f"expected input (N, T, C, H, W), got shape {tuple(x.shape)}")
        n, t, c, h, w = x.shape
        if t < 2:
            raise NetError(f"need at least 2 dates, got {t}")
        if c != cfg.in_channels:
            raise NetError(f"expected {cfg.in_channels} channels, got {c}")
        if h % cfg.size_multiple or w % cfg.size_multiple:
            raise NetError(f"height and width must be divisible by {cfg.size_multiple}, got {h}x{w}")
        if cfg.variant == 'unet_plain' and t != cfg.num_dates:
            raise NetError(f"unet_plain was built for {cfg.num_dates} dates, got {t}")

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


class TemporalUNet(ChangeNet):
    """unet_lstm: shared per-date encoder, ConvLSTM per level, temporal skips"""

    def __init__(self, config: NetConfig):
        super().__init__(config)
        depths = config.depths
        self.encoder = Encoder(config.in_channels, depths)
        self.temporal = nn.ModuleList(ConvLSTMCell(d, d, config.kernel_size) for d in depths)
        self.decoder = Decoder(depths)
        self.head = nn.Conv2d(depths[0], config.num_classes, 1)

    def temporal_summaries(self, x: torch.Tensor) -> List[torch.Tensor]:
        """Final hidden state of every level's ConvLSTM after the last date"""
        self.check_input(x)
        n, t = x.shape[:2]
        # all dates share the encoder, so they run as one batch
        features = self.encoder(x.flatten(0, 1))
        summaries = []
        for cell, level_features in zip(self.temporal, features):
            per_date = level_features.unflatten(0, (n, t))
            state = cell.init_state(per_date[:, 0])
            for step in range(t):
                state = cell(per_date[:, step], state)
            summaries.append(state.hidden)
        return summaries

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.decoder(self.temporal_summaries(x)))


class EarlyFusionUNet(ChangeNet):
    """unet_plain: dates concatenated along channels, max-pool skips"""

    def __init__(self, config: NetConfig):
        super().__init__(config)
        depths = config.depths
        self.encoder = Encoder(config.in_channels * config.num_dates, depths)
        self.decoder = Decoder(depths)
        self.head = nn.Conv2d(depths[0], config.num_classes, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        return self.head(self.decoder(self.encoder(x.flatten(1, 2))))


def _init_weights(model: nn.Module) -> None:
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            nn.init.kaiming_uniform_(module.weight, nonlinearity='relu')
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.BatchNorm2d):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
    # after the conv pass, which zeroes every bias
    for module in model.modules():
        if isinstance(module, ConvLSTMCell):
            hs = module.hidden_size
            with torch.no_grad():
                module.input_conv.bias[hs:2 * hs].fill_(1.0)


def build(config: NetConfig, seed: int = 0) -> ChangeNet:
    """Construct and deterministically initialize a network for config"""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = TemporalUNet(config) if config.variant == 'unet_lstm' else EarlyFusionUNet(config)
        _init_weights(model)
    logger.debug(f"Built {config.variant} with {count_parameters(model)} parameters (seed={seed})")
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def encoder_depths(model: ChangeNet) -> List[int]:
    return [block.conv.out_channels for block in model.encoder.blocks]


def forward(model: ChangeNet, x: torch.Tensor, mode: str = 'eval') -> torch.Tensor:
    """
    Class probabilities for (T, C, H, W) or (N, T, C, H, W) input. Eval mode uses
    frozen batch-norm statistics and no autograd; train mode updates them.
    """
    if mode not in ('train', 'eval'):
        raise NetError(f"mode must be 'train' or 'eval', got {mode}")
    single = x.dim() == 4
    if single:
        x = x.unsqueeze(0)

    if mode == 'train':
        model.train()
        probs = model(x)
    else:
        model.eval()
        with torch.no_grad():
            probs = model(x)
    return probs.squeeze(0) if single else probs


def gradients(model: ChangeNet, x: torch.Tensor, labels: torch.Tensor, loss_fn,
              mode: str = 'train') -> Dict[str, torch.Tensor]:
    """
    Reverse-mode gradient of loss_fn(probabilities, labels) with respect to every
    named parameter.
    """
    model.train(mode == 'train')
    model.zero_grad(set_to_none=True)
    probs = model(x)
    loss = loss_fn(probs, labels)
    loss.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
