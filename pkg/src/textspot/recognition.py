"""Text recognition network: contextual encoder over region features and a
2D-attention decoder that also exposes its per-step attention grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import alphabet

T_MAX_DEFAULT = 32


@dataclass
class AttentionStep:
    alpha: torch.Tensor  # (H, W') attention grid
    glimpse: torch.Tensor  # (D,) weighted feature sum
    symbol: int


@dataclass
class AttentionTrace:
    steps: list[AttentionStep]

    def __len__(self):
        return len(self.steps)


@dataclass
class EncoderState:
    columns: torch.Tensor  # (W', hidden) contextual column features
    holistic: torch.Tensor  # (hidden,) final layer-2 hidden state


class RecognitionHead(nn.Module):
    """Column-wise LSTM encoder plus 2-layer LSTM decoder with 2D attention.

    Encoder and decoder share no parameters.
    """

    def __init__(self, feature_dim: int = 256, hidden: int = 512, attn_dim: int = 512):
        super().__init__()
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.encoder_rnn = nn.LSTM(feature_dim, hidden, num_layers=2, batch_first=True)
        self.decoder_rnn = nn.LSTM(hidden, hidden, num_layers=2, batch_first=True)
        self.embed = nn.Embedding(alphabet.NUM_INPUT_TOKENS, hidden)  # the Psi transform
        self.w_v = nn.Linear(feature_dim, attn_dim, bias=True)
        self.w_h = nn.Linear(hidden, attn_dim, bias=False)
        self.w_e = nn.Linear(attn_dim, 1, bias=False)
        self.w_o = nn.Linear(hidden + feature_dim, alphabet.NUM_CLASSES)

    def encode(self, grid: torch.Tensor) -> EncoderState:
        """Vertical max-pool then 2-layer LSTM over columns of a (D,H,W') grid."""
        pooled = grid.max(dim=1).values  # (D, W')
        seq = pooled.t().unsqueeze(0)  # (1, W', D)
        out, (h_n, _) = self.encoder_rnn(seq)
        return EncoderState(columns=out[0], holistic=h_n[-1][0])

    def encode_batch(self, grids: list[torch.Tensor]) -> torch.Tensor:
        """Holistic vectors (N, hidden) for variable-width grids."""
        seqs = [g.max(dim=1).values.t() for g in grids]
        lengths = torch.tensor([s.shape[0] for s in seqs], dtype=torch.int64)
        padded = nn.utils.rnn.pad_sequence(seqs, batch_first=True)
        packed = nn.utils.rnn.pack_padded_sequence(
            padded, lengths, batch_first=True, enforce_sorted=False
        )
        _, (h_n, _) = self.encoder_rnn(packed)
        return h_n[-1]

    def attend(
        self, values: torch.Tensor, h_t: torch.Tensor, mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """2D attention over flattened grid cells.

        values: (N, L, D) cell features; h_t: (N, hidden); mask: (N, L) True
        where cells are real. Returns alpha (N, L) and glimpse (N, D).
        """
        e = torch.tanh(self.w_v(values) + self.w_h(h_t).unsqueeze(1))  # (N, L, A)
        scores = self.w_e(e).squeeze(-1)  # (N, L)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        alpha = torch.softmax(scores, dim=1)
        glimpse = torch.bmm(alpha.unsqueeze(1), values).squeeze(1)
        return alpha, glimpse

    def _flatten_values(self, grids: list[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        """Pad variable-width (D,H,W') grids to (N, L_max, D) cell lists + mask."""
        flats = [g.permute(1, 2, 0).reshape(-1, g.shape[0]) for g in grids]  # (H*W', D)
        lengths = torch.tensor([f.shape[0] for f in flats], dtype=torch.int64)
        values = nn.utils.rnn.pad_sequence(flats, batch_first=True)
        mask = torch.arange(values.shape[1])[None, :] < lengths[:, None]
        return values, mask

    def forward_teacher(
        self,
        grids: list[torch.Tensor],
        targets: list[list[int]],
        holistic_keep: list[bool] | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Teacher-forced decode over a batch.

        targets: token sequences including the final END. Returns per-step
        log-probabilities (N, T_max, classes) and a (N, T_max) validity mask.
        holistic_keep: optional per-word flags; words marked False get a zeroed
        step-0 holistic input (training-time dropout that forces the decoder to
        rely on attention instead of the whole-word encoder shortcut).
        """
        n = len(grids)
        device = grids[0].device
        dtype = grids[0].dtype
        holistic = self.encode_batch(grids)  # (N, hidden)
        if holistic_keep is not None:
            keep = torch.tensor(holistic_keep, dtype=dtype, device=device).unsqueeze(1)
            holistic = holistic * keep
        values, vmask = self._flatten_values(grids)
        t_max = max(len(t) for t in targets)
        # decoder inputs: step 0 holistic, step 1 START, then target symbols
        in_tokens = torch.full((n, t_max), alphabet.END, dtype=torch.int64, device=device)
        step_mask = torch.zeros((n, t_max), dtype=torch.bool, device=device)
        for i, t in enumerate(targets):
            step_mask[i, : len(t)] = True
            in_tokens[i, 0] = alphabet.START
            for j in range(1, len(t)):
                in_tokens[i, j] = t[j - 1]
        logps = []
        alphas = []
        state = None
        _, state = self.decoder_rnn(holistic.unsqueeze(1), state)
        for t in range(t_max):
            x = self.embed(in_tokens[:, t]).unsqueeze(1).to(dtype)
            out, state = self.decoder_rnn(x, state)
            h_t = out[:, 0]
            alpha, glimpse = self.attend(values, h_t, vmask)
            alphas.append(alpha)
            logits = self.w_o(torch.cat([h_t, glimpse], dim=1))
            logps.append(F.log_softmax(logits, dim=1))
        self._last_alphas = torch.stack(alphas, dim=1)  # (N, T_max, L)
        return torch.stack(logps, dim=1), step_mask

    def recognition_loss(
        self,
        grids: list[torch.Tensor],
        targets: list[list[int]],
        holistic_keep: list[bool] | None = None,
        attn_entropy: float = 0.0,
        attn_guide: list | None = None,
        guide_weight: float = 0.0,
        guide_sigma: float = 0.75,
    ) -> torch.Tensor:
        """Per-word summed cross entropy, shape (N,).

        attn_entropy > 0 adds that weight times the summed per-step attention
        entropy, a training-time sharpening pressure toward localized glimpses.
        attn_guide: optional per-word (T_chars, 2) arrays of target attention
        centroids in (row, col) grid coordinates; with guide_weight > 0 each
        character step's attention is pulled (cross-entropy against a Gaussian
        of width guide_sigma cells) toward its target.
        """
        logps, step_mask = self.forward_teacher(grids, targets, holistic_keep)
        n, t_max, _ = logps.shape
        tgt = torch.full((n, t_max), 0, dtype=torch.int64, device=logps.device)
        for i, t in enumerate(targets):
            tgt[i, : len(t)] = torch.tensor(t, dtype=torch.int64, device=logps.device)
        picked = logps.gather(2, tgt.unsqueeze(-1)).squeeze(-1)
        loss = -(picked * step_mask.to(logps.dtype)).sum(dim=1)
        if attn_entropy > 0:
            a = self._last_alphas.clamp_min(1e-12)
            ent = -(a * a.log()).sum(dim=2)  # (N, T_max)
            loss = loss + attn_entropy * (ent * step_mask.to(a.dtype)).sum(dim=1)
        if attn_guide is not None and guide_weight > 0:
            dtype = loss.dtype
            extra = []
            for i, guide in enumerate(attn_guide):
                if guide is None or len(guide) == 0:
                    extra.append(loss.new_zeros(()))
                    continue
                h_i, w_i = grids[i].shape[1], grids[i].shape[2]
                rows = torch.arange(h_i, dtype=dtype).repeat_interleave(w_i) + 0.5
                cols = torch.arange(w_i, dtype=dtype).repeat(h_i) + 0.5
                g = torch.as_tensor(np.asarray(guide), dtype=dtype)  # (T, 2)
                d2 = (rows[None, :] - g[:, 0:1]) ** 2 + (cols[None, :] - g[:, 1:2]) ** 2
                p = torch.softmax(-d2 / (2.0 * guide_sigma**2), dim=1)  # (T, L)
                a = self._last_alphas[i, : g.shape[0], : h_i * w_i].clamp_min(1e-12)
                extra.append(-(p * a.log()).sum())
            loss = loss + guide_weight * torch.stack(extra)
        return loss

    @torch.no_grad()
    def decode_greedy(
        self, grid: torch.Tensor, t_max: int = T_MAX_DEFAULT
    ) -> tuple[list[int], list[float], AttentionTrace]:
        """Greedy argmax decode; stops at END or after t_max steps.

        Returns emitted symbols (END excluded), per-step max probabilities
        (END step included), and the attention trace of emitted symbols.
        """
        h, w = grid.shape[1], grid.shape[2]
        values, vmask = self._flatten_values([grid])
        holistic = self.encode(grid).holistic.unsqueeze(0)
        state = None
        _, state = self.decoder_rnn(holistic.unsqueeze(1), state)
        prev = alphabet.START
        symbols: list[int] = []
        probs: list[float] = []
        steps: list[AttentionStep] = []
        for _ in range(t_max):
            x = self.embed(torch.tensor([prev])).unsqueeze(1).to(grid.dtype)
            out, state = self.decoder_rnn(x, state)
            h_t = out[:, 0]
            alpha, glimpse = self.attend(values, h_t, vmask)
            logits = self.w_o(torch.cat([h_t, glimpse], dim=1))
            p = torch.softmax(logits, dim=1)[0]
            sym = int(p.argmax())
            probs.append(float(p[sym]))
            if sym == alphabet.END:
                break
            symbols.append(sym)
            steps.append(
                AttentionStep(alpha=alpha[0].reshape(h, w).clone(), glimpse=glimpse[0].clone(), symbol=sym)
            )
            prev = sym
        return symbols, probs, AttentionTrace(steps=steps)


def recognition_score(probs: list[float]) -> float:
    """Mean of per-step max probabilities, END step included."""
    if not probs:
        return 0.0
    return float(sum(probs) / len(probs))
