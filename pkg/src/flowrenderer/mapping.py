"""Mapping network: parameter window -> motion vector."""

import torch.nn as nn
import torch.nn.functional as F

from .datamodel.params import N_PARAMS
from .exceptions import ValidationError
from .validation import check_window

LEAK = 0.2


class MappingNetwork(nn.Module):
    """Pointwise embedding, then ``n_layers`` of [valid temporal conv (k=3) ->
    leaky ReLU -> centre crop of one column per side], then temporal mean.

    Each layer consumes four columns, so a window needs at least
    ``4 * n_layers + 1`` columns.
    """

    def __init__(self, n_params=N_PARAMS, motion_dim=256, n_layers=3):
        super().__init__()
        self.n_params = n_params
        self.motion_dim = motion_dim
        self.embed = nn.Conv1d(n_params, motion_dim, kernel_size=1)
        self.layers = nn.ModuleList(nn.Conv1d(motion_dim, motion_dim, kernel_size=3) for _ in range(n_layers))

    @property
    def min_window(self):
        return 4 * len(self.layers) + 1

    def forward(self, window):
        if window.shape[-1] < self.min_window:
            raise ValidationError(
                f"window of {window.shape[-1]} columns is too short for {len(self.layers)} mapping layers "
                f"(need >= {self.min_window})"
            )
        x = self.embed(window)
        for conv in self.layers:
            x = F.leaky_relu(conv(x), LEAK)[..., 1:-1]
        return x.mean(dim=-1)


def map_motion(window, mapping):
    """Motion vector for a (73, L) window, or a batch (N, 73, L)."""
    w, squeezed = check_window(window, mapping.n_params)
    w = w.to(next(mapping.parameters()).dtype)
    T = mapping(w)
    return T[0] if squeezed else T
