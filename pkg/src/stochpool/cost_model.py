"""Analytic multiply-accumulate model and wall-time measurement harness.

The analytic model counts exactly the MACs executed by matmul and conv1d
during a forward pass, split into five buckets:

    fe           wave feature extractor convs + projection (audio runs)
                 plus the positional convolution (every run)
    attn_proj    q/k/v/output projections, 4 * T' * E^2 per layer
    attn_scores  logits and value mixing, 2 * ceil(T'/s_q) * ceil(T'/s_k) * E
    ffn          two feed-forward matmuls, 2 * T' * E * ffn_dim per layer
    upsample     shared linear head after replicate-upsampling, T * E^2

where T' = ceil(T / s_f). Softmax, layer norm, activations, and pooling
are excluded from both the analytic model and the instrumented counter;
they do show up in measured wall time, and that gap is reported rather
than hidden. Timing uses the median over repeats with an excluded warm-up
pass, runs strictly serially, and is done on a float32 copy of the model.
"""

from __future__ import annotations

import gc
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .ctc import greedy_decode
from .encoder import EncoderConfig, EncoderModel, FeatureExtractorConfig
from .errors import ConfigError, InputError
from .stochastic import CompressionConfig
from .tensor import Tensor, add, count_macs, matmul

CSV_HEADER = ("config,preset,frames,macs_total,macs_attn_scores,macs_attn_proj,"
              "macs_ffn,macs_fe,macs_upsample,wall_ms_median,wall_ms_min,"
              "wall_ms_max,symbol_error")

MIN_TIMER_TICKS = 100


def worker_count() -> int:
    """Worker cap from STOCHPOOL_THREADS (default 1)."""
    raw = os.environ.get("STOCHPOOL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"STOCHPOOL_THREADS must be an integer, got {raw!r}") from None


@dataclass
class CostReport:
    """Analytic and (optionally) measured cost of one configuration."""

    config: str
    preset: str
    frames: int
    macs_fe: int = 0
    macs_attn_proj: int = 0
    macs_attn_scores: int = 0
    macs_ffn: int = 0
    macs_upsample: int = 0
    wall_ms_median: float | None = None
    wall_ms_min: float | None = None
    wall_ms_max: float | None = None
    decode_ms_median: float | None = None
    symbol_error: float | None = None
    timer_flagged: int = 0

    @property
    def macs_total(self) -> int:
        return (self.macs_fe + self.macs_attn_proj + self.macs_attn_scores
                + self.macs_ffn + self.macs_upsample)

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "preset": self.preset,
            "frames": self.frames,
            "macs_total": self.macs_total,
            "macs_attn_scores": self.macs_attn_scores,
            "macs_attn_proj": self.macs_attn_proj,
            "macs_ffn": self.macs_ffn,
            "macs_fe": self.macs_fe,
            "macs_upsample": self.macs_upsample,
            "wall_ms_median": self.wall_ms_median,
            "wall_ms_min": self.wall_ms_min,
            "wall_ms_max": self.wall_ms_max,
            "symbol_error": self.symbol_error,
        }

    def to_csv_row(self) -> str:
        def cell(value):
            if value is None:
                return ""
            if isinstance(value, float):
                return f"{value:.6g}"
            return str(value)

        ordered = self.to_json_dict()
        return ",".join(cell(ordered[key]) for key in CSV_HEADER.split(","))


def _conv_stack_macs(fe: FeatureExtractorConfig, samples: int):
    """(macs, output_frames) for the feature-extractor conv table."""
    macs = 0
    length = samples
    c_in = 1
    for k, s, c_out in fe.layers:
        if length < k:
            raise InputError(f"audio of {samples} samples too short for the conv stack")
        length = (length - k) // s + 1
        macs += length * c_out * c_in * k
        c_in = c_out
    return macs, length


def analytic_cost(config: CompressionConfig, enc_config: EncoderConfig, frames: int,
                  preset: str = "custom", from_audio: bool = False) -> CostReport:
    """Exact MAC counts for one forward pass over ``frames`` input frames.

    ``from_audio`` includes the wave feature extractor (for the shortest
    audio yielding exactly ``frames`` frames); otherwise the pipeline is
    assumed to start from features and the fe bucket holds only the
    positional convolution.
    """
    if frames < 1:
        raise ConfigError(f"frames must be >= 1, got {frames}")
    if config.depth != enc_config.depth:
        raise ConfigError(f"config has {config.depth} layers, encoder depth is "
                          f"{enc_config.depth}")
    if config.s_f > enc_config.max_squeeze:
        raise ConfigError(f"squeeze factor {config.s_f} exceeds ceiling "
                          f"{enc_config.max_squeeze}")
    for s_k, s_q in config.per_layer:
        if s_k > enc_config.max_kv_pool or s_q > enc_config.max_q_pool:
            raise ConfigError(f"pooling factors ({s_k},{s_q}) exceed ceilings")

    e = enc_config.model_dim
    report = CostReport(config.describe(), preset, frames)

    if from_audio:
        fe = FeatureExtractorConfig.compact(enc_config.base_channels)
        conv_macs, fe_frames = _conv_stack_macs(fe, fe.samples_for_frames(frames))
        if fe_frames != frames:
            raise ConfigError(f"conv table yields {fe_frames} frames, expected {frames}")
        report.macs_fe += conv_macs
        report.macs_fe += frames * fe.out_channels * e  # projection to model width

    t_squeezed = -(-frames // config.s_f)
    report.macs_fe += (t_squeezed * e * (e // enc_config.pos_conv_groups)
                       * enc_config.pos_conv_kernel)
    for s_k, s_q in config.per_layer:
        n_q = -(-t_squeezed // s_q)
        n_k = -(-t_squeezed // s_k)
        report.macs_attn_proj += 4 * t_squeezed * e * e
        report.macs_attn_scores += 2 * n_q * n_k * e
        report.macs_ffn += 2 * t_squeezed * e * enc_config.ffn_dim
    if config.s_f > 1:
        report.macs_upsample += frames * e * e
    return report


def analytic_cost_dataset(config: CompressionConfig, enc_config: EncoderConfig,
                          frame_lengths, preset: str = "custom",
                          from_audio: bool = False) -> CostReport:
    """Sum of per-utterance analytic costs (MACs are additive)."""
    frame_lengths = list(frame_lengths)
    if not frame_lengths:
        raise InputError("frame_lengths is empty")
    total = CostReport(config.describe(), preset, 0)
    for frames in frame_lengths:
        one = analytic_cost(config, enc_config, frames, preset=preset, from_audio=from_audio)
        total.frames += one.frames
        total.macs_fe += one.macs_fe
        total.macs_attn_proj += one.macs_attn_proj
        total.macs_attn_scores += one.macs_attn_scores
        total.macs_ffn += one.macs_ffn
        total.macs_upsample += one.macs_upsample
    return total


def instrumented_macs(model: EncoderModel, config: CompressionConfig, frames: int,
                      from_audio: bool = False):
    """Run a real forward pass under the MAC counter; the oracle side of
    the analytic model's exactness check."""
    if from_audio:
        samples = model.fe.samples_for_frames(frames)
        audio = np.zeros(samples)
        with count_macs() as counter:
            feats = model.extract_features(audio)
            model.forward(feats, config)
        return counter
    feats = np.zeros((frames, model.config.model_dim))
    with count_macs() as counter:
        model.forward(feats, config)
    return counter


def _median_min_max(values):
    return (float(np.median(values)), float(min(values)), float(max(values)))


def _pinned_to_one_worker():
    """Limit BLAS thread pools to one worker for the timed region.

    Measurement runs in a single execution context; multi-threaded GEMM
    adds scheduler jitter that can swamp small configuration deltas.
    Falls back to a no-op when threadpoolctl is unavailable.
    """
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    except ImportError:
        from contextlib import nullcontext

        return nullcontext()


def measure(model: EncoderModel, config: CompressionConfig, dataset,
            repeats: int = 5, head: dict | None = None) -> CostReport:
    """Median wall time of float32 forward passes over a dataset.

    Per utterance: one excluded warm-up pass, then ``repeats`` timed runs;
    medians (and min/max) are summed over the dataset. Decoding (output
    head plus greedy collapse) is timed separately when a head is given.
    Runs strictly serially in the calling thread.
    """
    if repeats < 3:
        raise ConfigError(f"repeats must be >= 3, got {repeats}")
    if len(dataset) < 1:
        raise InputError("measure requires a non-empty dataset")
    bench = model.astype(np.float32)
    head32 = None
    if head is not None:
        head32 = {name: Tensor(t.data, dtype=np.float32) for name, t in head.items()}
    tick_ns = time.get_clock_info("perf_counter").resolution * 1e9
    frames_total = 0
    med_sum = lo_sum = hi_sum = 0.0
    decode_meds = []
    flagged = 0
    gc_was_enabled = gc.isenabled()
    gc.disable()  # collector pauses otherwise pollute per-repeat samples
    try:
        with _pinned_to_one_worker():
            for i in range(len(dataset)):
                utt = dataset[i]
                if utt.features is not None:
                    feats = Tensor(utt.features, dtype=np.float32)
                else:
                    feats = Tensor(bench.extract_features(utt.audio).data)
                frames_total += feats.shape[0]
                bench.forward(feats, config)  # warm-up, excluded
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter_ns()
                    encoded = bench.forward(feats, config)
                    times.append(time.perf_counter_ns() - t0)
                med, lo, hi = _median_min_max(times)
                if med < MIN_TIMER_TICKS * tick_ns:
                    flagged += 1
                med_sum += med
                lo_sum += lo
                hi_sum += hi
                if head32 is not None:
                    decode_times = []
                    for _ in range(repeats):
                        t0 = time.perf_counter_ns()
                        logits = add(matmul(encoded, head32["head.weight"]),
                                     head32["head.bias"])
                        greedy_decode(logits)
                        decode_times.append(time.perf_counter_ns() - t0)
                    decode_meds.append(float(np.median(decode_times)))
    finally:
        if gc_was_enabled:
            gc.enable()
    report = CostReport(config.describe(), preset="custom", frames=frames_total)
    report.wall_ms_median = med_sum / 1e6
    report.wall_ms_min = lo_sum / 1e6
    report.wall_ms_max = hi_sum / 1e6
    report.timer_flagged = flagged
    if decode_meds:
        report.decode_ms_median = float(sum(decode_meds)) / 1e6
    return report


def sweep(model: EncoderModel, configs, dataset, preset: str = "custom",
          repeats: int = 5, head: dict | None = None, measure_time: bool = True,
          from_audio: bool = False) -> list:
    """One CostReport per configuration: analytic MACs, optional timing,
    optional greedy symbol error when the dataset is labeled."""
    configs = list(configs)
    if not configs:
        raise ConfigError("sweep requires at least one configuration")
    if len(dataset) < 1:
        raise InputError("sweep requires a non-empty dataset")
    frame_lengths = []
    labeled = True
    for i in range(len(dataset)):
        utt = dataset[i]
        if utt.features is not None:
            frame_lengths.append(utt.features.shape[0])
        else:
            frame_lengths.append(model.fe.frames_for_samples(utt.audio.size))
        labeled = labeled and utt.labels is not None
    # Analytic reports are pure functions of the config, so they may be
    # computed in parallel (capped by STOCHPOOL_THREADS); timing never is.
    workers = min(worker_count(), len(configs))
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            analytic_reports = list(pool.map(
                lambda cfg: analytic_cost_dataset(cfg, model.config, frame_lengths,
                                                  preset=preset, from_audio=from_audio),
                configs))
    else:
        analytic_reports = [analytic_cost_dataset(cfg, model.config, frame_lengths,
                                                  preset=preset, from_audio=from_audio)
                            for cfg in configs]
    reports = []
    for config, report in zip(configs, analytic_reports):
        if measure_time:
            timed = measure(model, config, dataset, repeats=repeats, head=head)
            report.wall_ms_median = timed.wall_ms_median
            report.wall_ms_min = timed.wall_ms_min
            report.wall_ms_max = timed.wall_ms_max
            report.decode_ms_median = timed.decode_ms_median
            report.timer_flagged = timed.timer_flagged
        if labeled and head is not None:
            from .training import evaluate

            report.symbol_error = evaluate(model, head, config, dataset).symbol_error
        reports.append(report)
    return reports


def write_csv(path, reports):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for report in reports:
            fh.write(report.to_csv_row() + "\n")


def write_json(path, reports):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_json_dict() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")
