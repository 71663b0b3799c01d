"""Component-level, cycle-counting simulator of the accelerator.

The machine: a cluster of row-parallel processing units (one per kernel
row, each with one xnor-popcount unit per kernel column), activation and
weight shift registers feeding them, row banks holding input rows behind a
rotating crossbar, two SRAM banks in a ping-pong source/sink arrangement,
a parameter buffer, and a near-memory DMA unit that accumulates partial
sums (read-add-write), applies thresholds, and OR-packs output bits.

Execution follows the compiled schedule exactly: per layer, per output
group, per input tile, rows are streamed into the row banks; per output
row the window slides one column per cycle after a (k_w - 1)-cycle fill,
producing one 2D-convolution partial value per cycle; the DMA writes the
first tile's sums and read-add-writes later tiles; on the last tile it
thresholds and ORs the bit into the packed output word.

Counter semantics (all word-granular unless noted):
  - cycles: out_w + k_w - 1 per (filter, tile, output row).
  - xnor_word_ops: k_h*k_w per produced column value; unused units idle.
  - src_reads / rowbank_writes: the DMA streams every real input word once
    per (group, tile) pass, in_h*in_w words, including rows a strided
    window never revisits; spatial padding is generated, not fetched.
  - csr_shifts: one per column the window front advances, i.e.
    (out_w - 1)*stride_x + k_w per (filter, tile, row); horizontal stride
    shifts stride_x times per produced value but still costs one cycle.
  - rowbank_reads: k_h words enter the activation registers per shift.
  - param_reads: k_h weight-row loads per (filter, tile, output row);
    the functional fetch is hoisted but the accounting models a reload.
  - sink_writes / sink_reads: one write per partial value, plus one read
    per read-add-write on tiles after the first.
  - packed_writes: one commit per completed packed output word.
  - crossbar_rotations: one per input row the window moves down.

The simulation is deterministic and bit-exact against the reference
forward pass; any access outside a program's declared regions aborts with
AddressFault.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .compiler import CODE_MODES, ControlStream, LayerProgram, MemoryConfig, layer_dims
from .core import (
    MODE_CONST,
    MODE_GE,
    MODE_LE,
    WORD_BITS,
    BinaryFeatureMap,
    _POPCOUNT,
    tile_mask,
)
from .errors import AddressFault, ConfigMismatch, ShapeError
from .model import ModelDescriptor

STAT_FIELDS = (
    "cycles",
    "xnor_word_ops",
    "src_reads",
    "sink_reads",
    "sink_writes",
    "packed_writes",
    "param_reads",
    "rowbank_reads",
    "rowbank_writes",
    "csr_shifts",
    "crossbar_rotations",
)


@dataclass
class Stats:
    cycles: int = 0
    xnor_word_ops: int = 0
    src_reads: int = 0
    sink_reads: int = 0
    sink_writes: int = 0
    packed_writes: int = 0
    param_reads: int = 0
    rowbank_reads: int = 0
    rowbank_writes: int = 0
    csr_shifts: int = 0
    crossbar_rotations: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Stats":
        return cls(**{k: int(d[k]) for k in STAT_FIELDS})


class MachineState:
    """Live memories and datapath state for one simulation run."""

    def __init__(self, cfg: MemoryConfig, param_image: np.ndarray):
        self.cfg = cfg
        self.banks = {
            "A": np.zeros(cfg.bank_words("A"), dtype=np.uint16),
            "B": np.zeros(cfg.bank_words("B"), dtype=np.uint16),
        }
        self.param_image = param_image
        self.row_banks: list[np.ndarray | None] = [None] * cfg.row_banks
        self.rotation = 0
        self.stats = Stats()


def _check_layer_regions(p: LayerProgram, st: MachineState) -> None:
    src_words = st.cfg.bank_words(p.src_bank)
    sink_words = st.cfg.bank_words(p.sink_bank)
    if p.in_base < 0 or p.in_base + p.in_words > src_words:
        raise AddressFault(
            f"layer {p.index}: input region [{p.in_base}, "
            f"{p.in_base + p.in_words}) outside source bank of {src_words} words"
        )
    if p.psum_base < 0 or p.psum_base + p.psum_words > sink_words:
        raise AddressFault(
            f"layer {p.index}: partial-sum region [{p.psum_base}, "
            f"{p.psum_base + p.psum_words}) outside sink bank of {sink_words} words"
        )
    if p.out_base < 0 or p.out_base + p.packed_words > sink_words:
        raise AddressFault(
            f"layer {p.index}: packed output region [{p.out_base}, "
            f"{p.out_base + p.packed_words}) outside sink bank of {sink_words} words"
        )
    lo, hi = p.psum_base, p.psum_base + p.psum_words
    if max(lo, p.out_base) < min(hi, p.out_base + p.packed_words):
        raise AddressFault(
            f"layer {p.index}: partial-sum and packed output regions overlap"
        )
    if p.param_base < 0 or p.param_base + p.param_words > len(st.param_image):
        raise AddressFault(
            f"layer {p.index}: parameter region [{p.param_base}, "
            f"{p.param_base + p.param_words}) outside the parameter image of "
            f"{len(st.param_image)} words"
        )


def _group_params(p: LayerProgram, image, filters, t):
    """Weight words (F, k_h, k_w) and threshold columns for one (group, tile)."""
    f_idx = np.asarray(filters).reshape(-1, 1, 1)
    r_idx = np.arange(p.k_h).reshape(1, -1, 1)
    c_idx = np.arange(p.k_w).reshape(1, 1, -1)
    idx = p.param_base + ((f_idx * p.k_h + r_idx) * p.k_w + c_idx) * p.t_in + t
    weights = image[idx]
    thr_base = p.param_base + p.c_out * p.k_h * p.k_w * p.t_in
    tvals = image[thr_base + 2 * np.asarray(filters)].astype(np.int16).astype(np.int32)
    tmodes = image[thr_base + 2 * np.asarray(filters) + 1]
    return weights, tvals, tmodes


def _layer_output(p: LayerProgram, sink: np.ndarray) -> BinaryFeatureMap:
    words = sink[p.out_base : p.out_base + p.packed_words]
    return BinaryFeatureMap(
        h=p.pooled_h,
        w=p.pooled_w,
        c=p.c_out,
        words=words.reshape(p.g_out, p.pooled_h, p.pooled_w).copy(),
    )


def simulate(
    cs: ControlStream,
    fmap: BinaryFeatureMap,
    trace=None,
    rotation_log: list | None = None,
    inject_fault: tuple[int, int, int, int] | None = None,
    return_layers: bool = False,
):
    """Execute a control stream; returns (output, Stats).

    trace, when a writable file object, receives one line per row-granular
    transaction batch (format is for debugging, not a stable interface).
    rotation_log, when a list, collects (layer, group, tile, out_row,
    bank read by unit row 0). inject_fault=(layer, channel, oy, ox)
    corrupts one fully accumulated partial sum (bitwise NOT) before
    thresholding, for fault-detection tests. With return_layers, the
    per-layer output maps are returned as a third element.
    """
    cfg = cs.config
    if (fmap.h, fmap.w, fmap.c) != tuple(cs.input_shape):
        raise ShapeError(
            f"control stream expects input {tuple(cs.input_shape)}, got "
            f"{(fmap.h, fmap.w, fmap.c)}"
        )
    for p in cs.programs:
        if p.k_h > cfg.bpus or p.k_h > cfg.row_banks:
            raise ConfigMismatch(
                f"layer {p.index}: kernel height {p.k_h} exceeds the array "
                f"({cfg.bpus} row units, {cfg.row_banks} row banks)"
            )
        if p.k_w > cfg.units_per_bpu or p.k_w > cfg.csr_width:
            raise ConfigMismatch(
                f"layer {p.index}: kernel width {p.k_w} exceeds the array "
                f"({cfg.units_per_bpu} units per row, csr width {cfg.csr_width})"
            )

    st = MachineState(cfg, cs.param_image)
    stats = st.stats
    fmap.check()

    # Load the input image into layer 0's source bank, unless it streams in
    # from off chip, in which case reads bypass the bank.
    first = cs.programs[0]
    input_words = fmap.words.reshape(first.t_in, first.in_h, first.in_w)
    if not cs.streamed_input:
        flat = input_words.reshape(-1)
        if first.in_base + flat.size > cfg.bank_words(first.src_bank):
            raise AddressFault(
                f"input of {flat.size} words does not fit the source bank"
            )
        st.banks[first.src_bank][first.in_base : first.in_base + flat.size] = flat

    layer_outs = []
    out = fmap
    for p in cs.programs:
        _check_layer_regions(p, st)
        src = st.banks[p.src_bank]
        sink = st.banks[p.sink_bank]
        streamed = cs.streamed_input and p.index == 0

        pw_pad = p.in_w + 2 * p.pad_x
        if p.pad_value > 0:
            pad_words = [tile_mask(p.c_in, t) for t in range(p.t_in)]
        else:
            pad_words = [0] * p.t_in
        ps = p.pool_stride if p.pool_enabled else 1
        psz = p.pool_size if p.pool_enabled else 1
        rows_for_oy = [
            [py for py in range(p.pooled_h) if py * ps <= oy <= py * ps + psz - 1]
            for oy in range(p.out_h)
        ]
        cover = (p.out_w - 1) * p.stride_x + p.k_w
        colspan = (p.out_w - 1) * p.stride_x + 1

        sink[p.out_base : p.out_base + p.packed_words] = 0  # clear stale bits

        for g in range(p.g_out):
            filters = list(range(WORD_BITS * g, min(WORD_BITS * g + WORD_BITS, p.c_out)))
            for t in range(p.t_in):
                weights, tvals, tmodes = _group_params(p, st.param_image, filters, t)
                pad_row = np.full(pw_pad, pad_words[t], dtype=np.uint16)
                st.rotation = 0
                next_row = 0

                def stream_rows(upto: int) -> None:
                    # Stream padded rows [next_row, upto] into the row banks.
                    nonlocal next_row
                    for y in range(next_row, upto + 1):
                        real = y - p.pad_y
                        if 0 <= real < p.in_h:
                            row = pad_row.copy()
                            base = p.in_base + (t * p.in_h + real) * p.in_w
                            if streamed:
                                row[p.pad_x : p.pad_x + p.in_w] = input_words[t, real]
                            else:
                                row[p.pad_x : p.pad_x + p.in_w] = src[
                                    base : base + p.in_w
                                ]
                            stats.src_reads += p.in_w
                            stats.rowbank_writes += p.in_w
                        else:
                            row = pad_row
                        st.row_banks[y % cfg.row_banks] = row
                    next_row = max(next_row, upto + 1)

                for oy in range(p.out_h):
                    top = oy * p.stride_y
                    stream_rows(top + p.k_h - 1)
                    if oy:
                        stats.crossbar_rotations += p.stride_y
                    st.rotation = top % cfg.row_banks
                    if rotation_log is not None:
                        rotation_log.append(
                            (p.index, g, t, oy, (0 + st.rotation) % cfg.row_banks)
                        )
                    win = np.empty((p.k_h, p.k_w, p.out_w), dtype=np.uint16)
                    for r in range(p.k_h):
                        bank = st.row_banks[(r + st.rotation) % cfg.row_banks]
                        for c in range(p.k_w):
                            win[r, c] = bank[c : c + colspan : p.stride_x]
                    x = win[None, :, :, :] ^ weights[:, :, :, None]
                    pc = _POPCOUNT[x].astype(np.int32).sum(axis=(1, 2))
                    rows = WORD_BITS * p.k_h * p.k_w - 2 * pc  # (F, out_w)

                    n_f = len(filters)
                    stats.param_reads += n_f * p.k_h
                    stats.csr_shifts += n_f * cover
                    stats.rowbank_reads += n_f * p.k_h * cover
                    stats.xnor_word_ops += n_f * p.k_h * p.k_w * p.out_w
                    stats.cycles += n_f * (p.out_w + p.k_w - 1)

                    for fi, f in enumerate(filters):
                        base = p.psum_base + ((f % WORD_BITS) * p.out_h + oy) * p.out_w
                        span = slice(base, base + p.out_w)
                        if t == 0:
                            acc = rows[fi].astype(np.int32)
                            stats.sink_writes += p.out_w
                        else:
                            cur = sink[span].astype(np.int16).astype(np.int32)
                            acc = cur + rows[fi]
                            stats.sink_reads += p.out_w
                            stats.sink_writes += p.out_w
                        sink[span] = acc.astype(np.int16).view(np.uint16)
                        if trace:
                            trace.write(
                                f"{stats.cycles} L{p.index} g{g} t{t} f{f} oy{oy} "
                                f"conv+{'acc' if t else 'wr'} psum@{base}\n"
                            )
                        if t != p.t_in - 1:
                            continue
                        if inject_fault is not None and inject_fault[:3] == (
                            p.index, f, oy,
                        ):
                            ox = inject_fault[3]
                            if 0 <= ox < p.out_w:
                                acc = acc.copy()
                                acc[ox] = int(np.invert(np.int16(acc[ox])))
                                sink[span] = acc.astype(np.int16).view(np.uint16)
                        mode = CODE_MODES[int(tmodes[fi]) & 3]
                        if mode == MODE_GE:
                            bits = (acc >= tvals[fi]).astype(np.uint16)
                        elif mode == MODE_LE:
                            bits = (acc <= tvals[fi]).astype(np.uint16)
                        else:
                            bits = np.full(
                                p.out_w, (int(tmodes[fi]) >> 2) & 1, dtype=np.uint16
                            )
                        shifted = bits << (f % WORD_BITS)
                        pspan = (p.pooled_w - 1) * ps + 1
                        for py in rows_for_oy[oy]:
                            pooled = np.zeros(p.pooled_w, dtype=np.uint16)
                            for c in range(psz):
                                seg = shifted[c : c + pspan : ps]
                                pooled[: seg.size] |= seg
                            obase = p.out_base + (g * p.pooled_h + py) * p.pooled_w
                            sink[obase : obase + p.pooled_w] |= pooled
                            if trace:
                                trace.write(
                                    f"{stats.cycles} L{p.index} g{g} f{f} "
                                    f"pool-or py{py} packed@{obase}\n"
                                )
                # Rows a strided window never revisits are still streamed
                # through the banks, so the whole image is fetched once.
                stream_rows(p.pad_y + p.in_h - 1)
            stats.packed_writes += p.pooled_h * p.pooled_w
        out = _layer_output(p, sink)
        if return_layers:
            layer_outs.append(out)
    if return_layers:
        return out, stats, layer_outs
    return out, stats


def analytic_cycles(model: ModelDescriptor, cfg: MemoryConfig | None = None):
    """Per-layer and total cycle counts from the closed form.

    One result per cycle in steady state plus a (k_w - 1)-cycle register
    fill per (filter, tile, output row); row-bank refills and weight loads
    overlap compute and cost no cycles.
    """
    per_layer = []
    for layer, (ih, iw, oh, ow, ph, pw) in zip(model.layers, layer_dims(model)):
        k_w = layer.geometry.k_w
        per_layer.append(layer.c_out * layer.t_in * oh * (ow + k_w - 1))
    return per_layer, sum(per_layer)


def stats_closed_form(model: ModelDescriptor, cfg: MemoryConfig | None = None) -> Stats:
    """Expected end-of-run counters, by the same accounting simulate uses."""
    s = Stats()
    for layer, (ih, iw, oh, ow, ph, pw) in zip(model.layers, layer_dims(model)):
        g = layer.geometry
        c_out, t_in, g_out = layer.c_out, layer.t_in, layer.g_out
        cover = (ow - 1) * g.stride_x + g.k_w
        s.xnor_word_ops += c_out * t_in * oh * ow * g.k_h * g.k_w
        s.src_reads += g_out * t_in * ih * iw
        s.rowbank_writes += g_out * t_in * ih * iw
        s.sink_writes += c_out * t_in * oh * ow
        s.sink_reads += c_out * (t_in - 1) * oh * ow
        s.packed_writes += g_out * ph * pw
        s.param_reads += c_out * t_in * oh * g.k_h
        s.csr_shifts += c_out * t_in * oh * cover
        s.rowbank_reads += c_out * t_in * oh * g.k_h * cover
        s.crossbar_rotations += g_out * t_in * (oh - 1) * g.stride_y
        s.cycles += c_out * t_in * oh * (ow + g.k_w - 1)
    return s
