"""Quantized frame coding: absolute coding of key-frames, closed-loop
delta coding of predicted frames, and quantization-aware fine-tuning.

Predicted frames delta-code each inherited splat against the same slot of
the previously *decoded* frame, so quantization error cannot accumulate
along a chain.  Injected splats have no predecessor and are stored as
absolute half-precision records.  The encoder reconstructs every frame
through the exact decoder path and feeds that reconstruction forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pipeline import EncodedSequence
from .quantize import (QuantConfig, dequantize_asymmetric, quantize_asymmetric,
                       rvq_decode, rvq_encode, train_codebooks)
from ._kernels import fit_backward, fit_forward
from .splats import FRAME_I, FRAME_P, INJECTED, SplatFrame, clamp_cholesky


def _f16_down(x: float) -> np.float16:
    """Largest float16 <= x."""
    y = np.float16(x)
    if float(y) > x:
        y = np.nextafter(y, np.float16(-np.inf))
    return y


def _f16_up(x: float) -> np.float16:
    """Smallest float16 >= x."""
    y = np.float16(x)
    if float(y) < x:
        y = np.nextafter(y, np.float16(np.inf))
    return y


def fit_chol_quant(values: np.ndarray, bits: int):
    """Coverage-guaranteed per-component scale/offset pairs, float16.

    Offsets round down and scales round up (after re-deriving the scale
    from the rounded offset), so every input stays inside the
    representable range and the dequantization error bound gamma holds
    for the *stored* parameters.
    """
    top = float(2 ** bits - 1)
    gammas = np.empty(3, dtype=np.float16)
    betas = np.empty(3, dtype=np.float16)
    for c in range(3):
        col = values[:, c]
        beta = _f16_down(float(col.min()))
        gamma_needed = (float(col.max()) - float(beta)) / top
        gammas[c] = _f16_up(max(gamma_needed, 1e-7))
        betas[c] = beta
    return gammas, betas


def quantize_with(values: np.ndarray, bits: int, gammas: np.ndarray,
                  betas: np.ndarray) -> np.ndarray:
    """Codes for (n, 3) values against given per-component parameters."""
    top = float(2 ** bits - 1)
    g = gammas.astype(np.float64)
    b = betas.astype(np.float64)
    codes = np.floor(np.clip((values - b) / g, 0.0, top))
    return codes.astype(np.uint16)


def dequantize_with(codes: np.ndarray, gammas: np.ndarray,
                    betas: np.ndarray) -> np.ndarray:
    return codes.astype(np.float64) * gammas.astype(np.float64) \
        + betas.astype(np.float64)


@dataclass
class QuantizedFrame:
    """Wire-ready quantized parameters of one frame.

    Key-frames store every splat absolutely.  Predicted frames store
    half-float position deltas, b-bit shape deltas and RVQ color deltas
    for inherited slots, plus absolute half-float records for injected
    splats; ``inherited_mask`` preserves the original splat order.
    """

    kind: str
    n: int
    chol_scale: np.ndarray      # (3,) float16
    chol_offset: np.ndarray     # (3,) float16
    codebooks: np.ndarray       # (M, B, 3) float16
    # Key-frame planes
    positions16: np.ndarray | None = None   # (n, 2) float16
    chol_codes: np.ndarray | None = None    # (n, 3) uint16
    color_indices: np.ndarray | None = None  # (n, M) uint16
    # Predicted-frame planes
    inherited_mask: np.ndarray | None = None  # (n,) bool
    slot_map: np.ndarray | None = None        # (n_inh,) uint32
    pos_delta16: np.ndarray | None = None     # (n_inh, 2) float16
    chol_delta_codes: np.ndarray | None = None   # (n_inh, 3) uint16
    color_delta_indices: np.ndarray | None = None  # (n_inh, M) uint16
    injected_pos16: np.ndarray | None = None     # (n_inj, 2) float16
    injected_chol16: np.ndarray | None = None    # (n_inj, 3) float16
    injected_color16: np.ndarray | None = None   # (n_inj, 3) float16

    @property
    def n_inherited(self) -> int:
        return 0 if self.inherited_mask is None else int(self.inherited_mask.sum())


def encode_frame(frame: SplatFrame, prev: SplatFrame | None, quant: QuantConfig,
                 seed=0, chol_quant=None, codebooks=None) -> QuantizedFrame:
    """Quantize one frame, absolutely (I) or against ``prev`` (P).

    ``prev`` must be the previously *decoded* frame.  ``chol_quant`` and
    ``codebooks`` override the data-fitted quantizer parameters, as the
    quantization-aware fine-tune does.
    """
    n = len(frame)
    if frame.kind == FRAME_P:
        if prev is None:
            raise ValueError("predicted frame needs the previous decoded frame")
        inherited = frame.prev_slots != INJECTED
        slots = frame.prev_slots[inherited].astype(np.int64)
        if slots.size and (slots.min() < 0 or slots.max() >= len(prev)):
            raise ValueError("slot map references outside the previous frame")
        pos_delta = frame.positions[inherited] - prev.positions[slots]
        chol_delta = frame.cholesky[inherited] - prev.cholesky[slots]
        color_delta = frame.colors[inherited] - prev.colors[slots]
        if chol_quant is None:
            source = chol_delta if chol_delta.size else np.zeros((1, 3))
            gammas, betas = fit_chol_quant(source, quant.cholesky_bits)
        else:
            gammas, betas = chol_quant
        if codebooks is None:
            source = color_delta if color_delta.size else np.zeros((1, 3))
            codebooks = train_codebooks(source, quant, seed)
        books16 = codebooks.astype(np.float16)
        books = books16.astype(np.float64)
        return QuantizedFrame(
            kind=FRAME_P, n=n, chol_scale=gammas, chol_offset=betas,
            codebooks=books16,
            inherited_mask=inherited,
            slot_map=slots.astype(np.uint32),
            pos_delta16=pos_delta.astype(np.float16),
            chol_delta_codes=quantize_with(chol_delta, quant.cholesky_bits,
                                           gammas, betas),
            color_delta_indices=rvq_encode(color_delta, books)
            if slots.size else np.empty((0, quant.rvq_stages), dtype=np.uint16),
            injected_pos16=frame.positions[~inherited].astype(np.float16),
            injected_chol16=frame.cholesky[~inherited].astype(np.float16),
            injected_color16=frame.colors[~inherited].astype(np.float16))

    if chol_quant is None:
        gammas, betas = fit_chol_quant(frame.cholesky, quant.cholesky_bits)
    else:
        gammas, betas = chol_quant
    if codebooks is None:
        codebooks = train_codebooks(frame.colors, quant, seed)
    books16 = codebooks.astype(np.float16)
    books = books16.astype(np.float64)
    return QuantizedFrame(
        kind=FRAME_I, n=n, chol_scale=gammas, chol_offset=betas,
        codebooks=books16,
        positions16=frame.positions.astype(np.float16),
        chol_codes=quantize_with(frame.cholesky, quant.cholesky_bits,
                                 gammas, betas),
        color_indices=rvq_encode(frame.colors, books))


def reconstruct_frame(qframe: QuantizedFrame,
                      prev: SplatFrame | None) -> SplatFrame:
    """Exact decoder-side reconstruction; also used inside the encoder."""
    if qframe.kind == FRAME_I:
        positions = qframe.positions16.astype(np.float64)
        cholesky = dequantize_with(qframe.chol_codes, qframe.chol_scale,
                                   qframe.chol_offset)
        colors = rvq_decode(qframe.color_indices,
                            qframe.codebooks.astype(np.float64))
    else:
        if prev is None:
            raise ValueError("predicted frame needs the previous decoded frame")
        mask = qframe.inherited_mask
        slots = qframe.slot_map.astype(np.int64)
        if slots.size and (slots.min() < 0 or slots.max() >= len(prev)):
            raise ValueError("slot map references outside the previous frame")
        n = qframe.n
        positions = np.empty((n, 2))
        cholesky = np.empty((n, 3))
        colors = np.empty((n, 3))
        positions[mask] = prev.positions[slots] \
            + qframe.pos_delta16.astype(np.float64)
        cholesky[mask] = prev.cholesky[slots] + dequantize_with(
            qframe.chol_delta_codes, qframe.chol_scale, qframe.chol_offset)
        colors[mask] = prev.colors[slots] + rvq_decode(
            qframe.color_delta_indices, qframe.codebooks.astype(np.float64))
        positions[~mask] = qframe.injected_pos16.astype(np.float64)
        cholesky[~mask] = qframe.injected_chol16.astype(np.float64)
        colors[~mask] = qframe.injected_color16.astype(np.float64)
    clamp_cholesky(cholesky)
    n = positions.shape[0]
    return SplatFrame(positions, cholesky, colors, np.ones(n), qframe.kind,
                      np.full(n, INJECTED, dtype=np.int32))


class _ScalarAdam:
    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)

    def step(self, params, grad, lr, t, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = beta1 * self.m + (1 - beta1) * grad
        self.v = beta2 * self.v + (1 - beta2) * grad * grad
        params -= lr * (self.m / (1 - beta1 ** t)) \
            / (np.sqrt(self.v / (1 - beta2 ** t)) + eps)


@dataclass
class _QatState:
    positions: np.ndarray
    cholesky: np.ndarray
    colors: np.ndarray
    gammas: np.ndarray   # float64 working copies
    betas: np.ndarray


def _qat_frame(frame: SplatFrame, target: np.ndarray,
               prev_decoded: SplatFrame | None, quant: QuantConfig,
               seed, lr: float = 1e-3) -> tuple[SplatFrame, QuantizedFrame]:
    """Fine-tune one frame's parameters in the quantized domain.

    Renders through quantize-dequantize (shape) and RVQ (color) with
    straight-through gradients; the per-component scale and offset are
    trainable.  Keeps the best-loss state seen, the pre-fine-tune state
    included, so fine-tuning can never make the decoded frame worse.
    """
    target = np.ascontiguousarray(target, dtype=np.float64)
    height, width = target.shape[:2]
    n = len(frame)
    is_p = frame.kind == FRAME_P
    if is_p:
        mask = frame.prev_slots != INJECTED
        slots = frame.prev_slots[mask].astype(np.int64)
        pos_prev = prev_decoded.positions[slots]
        chol_prev = prev_decoded.cholesky[slots]
        color_prev = prev_decoded.colors[slots]
    else:
        mask = np.zeros(n, dtype=bool)

    def shape_ref(chol):
        return chol[mask] - chol_prev if is_p else chol

    def color_ref(colors):
        return colors[mask] - color_prev if is_p else colors

    base = shape_ref(frame.cholesky)
    if base.size == 0:
        base = np.zeros((1, 3))
    gammas16, betas16 = fit_chol_quant(base, quant.cholesky_bits)
    color_base = color_ref(frame.colors)
    books = train_codebooks(color_base if color_base.size else np.zeros((1, 3)),
                            quant, seed).astype(np.float16).astype(np.float64)

    state = _QatState(frame.positions.copy(), frame.cholesky.copy(),
                      frame.colors.copy(),
                      gammas16.astype(np.float64), betas16.astype(np.float64))
    top = float(2 ** quant.cholesky_bits - 1)

    def quantized_view(st: _QatState):
        """Frame as the decoder will see it, given the current state."""
        gam16 = np.asarray([_f16_up(max(g, 1e-7)) for g in st.gammas],
                           dtype=np.float16)
        bet16 = st.betas.astype(np.float16)
        cholesky = st.cholesky.copy()
        colors = st.colors.copy()
        positions = st.positions.copy()
        if is_p:
            d = st.cholesky[mask] - chol_prev
            codes = quantize_with(d, quant.cholesky_bits, gam16, bet16)
            cholesky[mask] = chol_prev + dequantize_with(codes, gam16, bet16)
            cd = st.colors[mask] - color_prev
            idx = rvq_encode(cd, books) if cd.size \
                else np.empty((0, books.shape[0]), dtype=np.uint16)
            colors[mask] = color_prev + rvq_decode(idx, books)
            cholesky[~mask] = st.cholesky[~mask].astype(np.float16)
            colors[~mask] = st.colors[~mask].astype(np.float16)
            positions[mask] = pos_prev + (st.positions[mask] - pos_prev
                                          ).astype(np.float16).astype(np.float64)
            positions[~mask] = st.positions[~mask].astype(np.float16)
        else:
            codes = quantize_with(st.cholesky, quant.cholesky_bits, gam16, bet16)
            cholesky = dequantize_with(codes, gam16, bet16)
            idx = rvq_encode(st.colors, books)
            colors = rvq_decode(idx, books)
            positions = st.positions.astype(np.float16).astype(np.float64)
        clamp_cholesky(cholesky)
        view = SplatFrame(positions, cholesky, colors, np.ones(n), frame.kind,
                          frame.prev_slots.copy())
        return view, codes, (gam16, bet16)

    def decoded_loss(st):
        view, _, _ = quantized_view(st)
        img, _ = fit_forward(view, width, height, False)
        diff = img - target
        return float(np.einsum("ijk,ijk->", diff, diff) / (height * width))

    best_loss = decoded_loss(state)
    best = (state.positions.copy(), state.cholesky.copy(), state.colors.copy(),
            state.gammas.copy(), state.betas.copy())

    opt_pos, opt_chol, opt_col = (_ScalarAdam((n, 2)), _ScalarAdam((n, 3)),
                                  _ScalarAdam((n, 3)))
    opt_gam, opt_bet = _ScalarAdam(3), _ScalarAdam(3)
    grad_scale = 2.0 / (height * width)

    for it in range(1, quant.finetune_iterations + 1):
        view, codes, (gam16, bet16) = quantized_view(state)
        img, ctx = fit_forward(view, width, height, False)
        diff = img - target
        loss = float(np.einsum("ijk,ijk->", diff, diff) / (height * width))
        if loss < best_loss:
            best_loss = loss
            best = (state.positions.copy(), state.cholesky.copy(),
                    state.colors.copy(), state.gammas.copy(),
                    state.betas.copy())
        grads = fit_backward(view, ctx, diff * grad_scale, False)
        # Straight-through: gradients at the quantized view pass to raw
        # parameters unchanged; scale/offset follow the code-frozen path.
        code_src = grads.cholesky[mask] if is_p else grads.cholesky
        gam_grad = (code_src * codes.astype(np.float64)).sum(axis=0)
        bet_grad = code_src.sum(axis=0)
        # Commitment pulls raw colors toward their reconstructions.
        cd = color_ref(state.colors)
        if cd.size:
            idx = rvq_encode(cd, books)
            commit = (2.0 * quant.commitment_weight / max(cd.shape[0], 1)) \
                * (cd - rvq_decode(idx, books))
            if is_p:
                grads.colors[mask] += commit
            else:
                grads.colors += commit
        diag = float(np.hypot(width, height))
        opt_pos.step(state.positions, grads.positions * diag, lr, it)
        opt_chol.step(state.cholesky, grads.cholesky, lr, it)
        opt_col.step(state.colors, grads.colors, lr, it)
        opt_gam.step(state.gammas, gam_grad, lr * 1e-2, it)
        opt_bet.step(state.betas, bet_grad, lr * 1e-2, it)
        np.maximum(state.gammas, 1e-7, out=state.gammas)
        clamp_cholesky(state.cholesky)

    state.positions, state.cholesky, state.colors, state.gammas, state.betas = best
    # Project shape values into the representable range so the stored
    # parameters and the stream agree exactly.
    gam16 = np.asarray([_f16_up(max(g, 1e-7)) for g in state.gammas],
                       dtype=np.float16)
    bet16 = state.betas.astype(np.float16)
    lo = bet16.astype(np.float64)
    hi = lo + gam16.astype(np.float64) * top
    if is_p:
        d = np.clip(state.cholesky[mask] - chol_prev, lo, hi)
        state.cholesky[mask] = chol_prev + d
    else:
        state.cholesky = np.clip(state.cholesky, lo, hi)
    clamp_cholesky(state.cholesky)

    tuned = SplatFrame(state.positions, state.cholesky, state.colors,
                       np.ones(n), frame.kind, frame.prev_slots.copy())
    qframe = encode_frame(tuned, prev_decoded, quant, seed,
                          chol_quant=(gam16, bet16),
                          codebooks=books)
    return tuned, qframe


def quantization_finetune(sequence: EncodedSequence, targets: np.ndarray,
                          quant: QuantConfig, seed=0, progress=None
                          ) -> tuple[EncodedSequence, list[QuantizedFrame]]:
    """Re-optimize every frame in the quantized domain and encode it.

    Frames run in order so each predicted frame tunes against the already
    quantized reconstruction of its predecessor (closed loop).  Returns
    the fine-tuned sequence and the matching quantized frames.
    """
    tuned_frames = []
    qframes = []
    prev_decoded = None
    for t, frame in enumerate(sequence.frames, start=1):
        tuned, qframe = _qat_frame(frame, targets[t - 1], prev_decoded, quant,
                                   [seed, t, 7])
        tuned_frames.append(tuned)
        qframes.append(qframe)
        prev_decoded = reconstruct_frame(qframe, prev_decoded)
        if progress is not None:
            progress(t)
    tuned_seq = EncodedSequence(tuned_frames, sequence.keyframes,
                                sequence.reports, sequence.width,
                                sequence.height, sequence.rate_control_n)
    return tuned_seq, qframes
