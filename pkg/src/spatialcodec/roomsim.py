"""Image-source room impulse responses and reverberant array mixtures.

Reflections are rendered with a Hann-windowed sinc kernel so that the
sub-sample inter-channel delays of the array survive; the codec and every
spatial metric downstream depend on that phase.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, fftconvolve, sosfilt

from .signal import DEFAULT_SAMPLE_RATE, AudioBuffer, read_audio, write_audio

SPEED_OF_SOUND = 343.0
DEFAULT_SPACINGS = (0.02, 0.02, 0.02, 0.14, 0.02, 0.02, 0.02)
KERNEL_TAPS = 81
MAX_ORDER_CAP = 30
RT60_RANGE = (0.0, 0.7)
HIGHPASS_HZ = 50.0


@dataclass
class ArrayGeometry:
    positions: np.ndarray
    reference_index: int = 0

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError("positions must be (M, 3)")
        if not 0 <= self.reference_index < len(p):
            raise ValueError("reference_index out of range")
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)
        if np.any(d[np.triu_indices(len(p), 1)] <= 0):
            raise ValueError("microphone positions must be distinct")
        self.positions = p

    @property
    def num_mics(self) -> int:
        return len(self.positions)

    @property
    def center(self) -> np.ndarray:
        return self.positions.mean(axis=0)

    @property
    def axis(self) -> np.ndarray:
        a = self.positions[-1] - self.positions[0]
        return a / np.linalg.norm(a)

    def axial_positions(self) -> np.ndarray:
        """Signed mic coordinates along the array axis, relative to the center."""
        return (self.positions - self.center) @ self.axis

    def translated(self, center) -> "ArrayGeometry":
        return ArrayGeometry(self.positions - self.center + np.asarray(center), self.reference_index)


def default_array(center=(0.0, 0.0, 0.0), spacings=DEFAULT_SPACINGS, reference_index: int = 0) -> ArrayGeometry:
    """8-mic non-uniform linear array along x, centered on ``center``."""
    x = np.concatenate([[0.0], np.cumsum(spacings)])
    x -= x.mean()
    pos = np.zeros((len(x), 3))
    pos[:, 0] = x
    return ArrayGeometry(pos + np.asarray(center, dtype=np.float64), reference_index)


@dataclass
class RoomSpec:
    dimensions: tuple
    rt60_target: float
    source_position: tuple
    array_center: tuple | None = None
    max_image_order: int | None = None
    speed_of_sound: float = SPEED_OF_SOUND
    # overrides the value derived from rt60_target when set
    absorption: float | None = None

    def __post_init__(self):
        self.dimensions = tuple(float(v) for v in self.dimensions)
        self.source_position = tuple(float(v) for v in self.source_position)
        if len(self.dimensions) != 3 or min(self.dimensions) <= 0:
            raise ValueError("room dimensions must be three positive lengths")
        if not RT60_RANGE[0] <= self.rt60_target <= RT60_RANGE[1]:
            raise ValueError(f"rt60_target {self.rt60_target} outside {RT60_RANGE}")
        if not inside(self.dimensions, self.source_position):
            raise ValueError("source outside the room")
        if self.absorption is not None and not 0.0 <= self.absorption <= 1.0:
            raise ValueError("absorption must be in [0, 1]")

    @property
    def volume(self) -> float:
        return float(np.prod(self.dimensions))

    @property
    def surface(self) -> float:
        a, b, c = self.dimensions
        return 2.0 * (a * b + a * c + b * c)

    def wall_absorption(self) -> float:
        if self.absorption is not None:
            return self.absorption
        if self.rt60_target <= 0:
            return 1.0
        # energy loss per reflection, in nepers, that makes the lattice decay hit the target
        nepers = _unit_decay_rt60(self.dimensions, self.speed_of_sound) / self.rt60_target
        return 1.0 - math.exp(-nepers)

    def reflection_coefficient(self) -> float:
        return math.sqrt(1.0 - self.wall_absorption())

    def default_order(self) -> int:
        beta = self.reflection_coefficient()
        if beta <= 0:
            return 0
        if beta >= 1:
            return MAX_ORDER_CAP
        # per-order shell energy ~ beta**(2N): stop 60 dB down
        return min(MAX_ORDER_CAP, math.ceil(math.log(1e-3) / math.log(beta)))


@dataclass
class RIRSet:
    responses: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    direct_delays: np.ndarray | None = None

    def __post_init__(self):
        self.responses = np.atleast_2d(np.asarray(self.responses, dtype=np.float64))
        if not np.all(np.isfinite(self.responses)):
            raise ValueError("RIRs must be finite")

    @property
    def num_channels(self) -> int:
        return self.responses.shape[0]

    @property
    def length(self) -> int:
        return self.responses.shape[1]


def _sphere_points(n: int = 4000) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + 5**0.5) * i
    rho = np.sqrt(1.0 - z * z)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def _unit_decay_rt60(dimensions, c: float = SPEED_OF_SOUND, fit_range=(-5.0, -25.0)) -> float:
    """RT60 of the image lattice when each reflection costs one neper of energy.

    At distance r an image in direction u has undergone r * sum(|u_i| / L_i)
    reflections, and image count grows as r**2 while intensity falls as
    r**-2, so energy arriving at time t is the sphere average of
    exp(-c t sum(|u_i| / L_i)). The decay scales as 1/nepers, so dividing
    this value by a target RT60 gives the required loss per reflection.
    Sabine and Eyring both use the mean of the exponent instead and so
    underestimate the decay of non-cubic rooms.
    """
    rates = c * (np.abs(_sphere_points()) / np.asarray(dimensions)).sum(axis=1)
    t = np.linspace(0.0, 60.0 / rates.min(), 20000)
    energy = np.exp(-np.outer(t, rates)).mean(axis=1)
    tail = np.exp(-rates * t[-1]).mean() / rates.mean()
    edc = np.cumsum(energy[::-1])[::-1] * (t[1] - t[0]) + tail
    edc_db = 10.0 * np.log10(edc / edc[0])
    sel = (edc_db <= fit_range[0]) & (edc_db >= fit_range[1])
    slope, _ = np.polyfit(t[sel], edc_db[sel], 1)
    return -60.0 / slope


def inside(dimensions, point, margin: float = 0.0) -> bool:
    p = np.asarray(point, dtype=np.float64)
    d = np.asarray(dimensions, dtype=np.float64)
    return bool(np.all(p > margin) and np.all(p < d - margin))


def image_sources(room: RoomSpec, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Image positions and reflection counts for every image of order <= ``order``.

    Along each axis the image coordinate is ``(1 - 2q) s + 2 n L`` after
    ``|2n - q|`` wall reflections.
    """
    per_axis = []
    n = np.arange(-order, order + 1)
    for L, s in zip(room.dimensions, room.source_position):
        q = np.repeat([0, 1], len(n))
        nn = np.tile(n, 2)
        refl = np.abs(2 * nn - q)
        keep = refl <= order
        per_axis.append(((1 - 2 * q[keep]) * s + 2 * nn[keep] * L, refl[keep]))
    (xs, rx), (ys, ry), (zs, rz) = per_axis
    X = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    R = (rx[:, None, None] + ry[None, :, None] + rz[None, None, :]).reshape(-1)
    keep = R <= order
    return X[keep], R[keep]


def fractional_delay_kernel(delays: np.ndarray, taps: int = KERNEL_TAPS) -> tuple[np.ndarray, np.ndarray]:
    """Hann-windowed sinc taps centered on each (fractional) delay.

    Returns ``(indices, weights)`` of shape (len(delays), taps).
    """
    half = taps // 2
    delays = np.asarray(delays, dtype=np.float64)
    idx = np.round(delays).astype(np.int64)[:, None] + np.arange(-half, half + 1)
    u = idx - delays[:, None]
    win = 0.5 * (1.0 + np.cos(np.pi * u / (half + 1)))
    return idx, np.sinc(u) * win


def render_arrivals(delays: np.ndarray, gains: np.ndarray, length: int | None = None) -> np.ndarray:
    idx, w = fractional_delay_kernel(delays)
    w = w * gains[:, None]
    if length is None:
        length = int(idx.max()) + 1
    ok = (idx >= 0) & (idx < length)
    return np.bincount(idx[ok], weights=w[ok], minlength=length)[:length]


def simulate_rir(room: RoomSpec, array: ArrayGeometry, seed=None, sample_rate: int = DEFAULT_SAMPLE_RATE) -> RIRSet:
    """Image-source RIRs from the room's source to every microphone.

    ``seed`` is accepted for symmetry with the dataset API; the image method
    itself is deterministic.
    """
    for p in array.positions:
        if not inside(room.dimensions, p):
            raise ValueError(f"microphone at {p} outside the room")
    order = room.max_image_order if room.max_image_order is not None else room.default_order()
    beta = room.reflection_coefficient()
    images, refl = image_sources(room, order)
    if beta == 0.0:
        images, refl = images[refl == 0], refl[refl == 0]
    gain_refl = beta ** refl.astype(np.float64)

    c = room.speed_of_sound
    rirs, direct = [], []
    for mic in array.positions:
        r = np.linalg.norm(images - mic, axis=1)
        rirs.append(render_arrivals(r / c * sample_rate, gain_refl / (4.0 * np.pi * r)))
        direct.append(np.linalg.norm(np.asarray(room.source_position) - mic) / c * sample_rate)
    length = max(len(h) for h in rirs)
    H = np.zeros((len(rirs), length))
    for i, h in enumerate(rirs):
        H[i, : len(h)] = h
    direct = np.asarray(direct)
    if beta > 0 and order > 0:
        # all image gains are positive, so their low-frequency sum builds up
        # coherently and decays slower than the room; remove it
        sos = butter(2, HIGHPASS_HZ, "high", fs=sample_rate, output="sos")
        H = sosfilt(sos, H, axis=1)
    H = H[:, : _truncation_length(H, direct, c, sample_rate)]
    return RIRSet(H, sample_rate, direct)


def _truncation_length(H: np.ndarray, direct_delays: np.ndarray, c: float, fs: int) -> int:
    # cut once the energy still to come is 60 dB below the direct path
    r = direct_delays / fs * c
    e_direct = (1.0 / (4.0 * np.pi * r)) ** 2
    edc = np.cumsum((H**2)[:, ::-1], axis=1)[:, ::-1]
    below = edc < 1e-6 * e_direct[:, None]
    cut = np.where(below.any(axis=1), below.argmax(axis=1), H.shape[1])
    floor = int(np.ceil(direct_delays.max())) + KERNEL_TAPS // 2 + 1
    return int(min(H.shape[1], max(cut.max(), floor)))


def plane_wave_rirs(array: ArrayGeometry, theta_deg: float, sample_rate: int = DEFAULT_SAMPLE_RATE,
                    offset: float = 64.0, c: float = SPEED_OF_SOUND) -> RIRSet:
    """Far-field arrival from angle ``theta_deg`` to the array axis.

    The array center receives the wave ``offset`` samples after emission.
    """
    p = array.axial_positions()
    delays = offset - p * math.cos(math.radians(theta_deg)) / c * sample_rate
    length = int(np.ceil(delays.max())) + KERNEL_TAPS
    H = np.stack([render_arrivals(np.array([d]), np.ones(1), length) for d in delays])
    return RIRSet(H, sample_rate, delays)


def order_energies(room: RoomSpec, array: ArrayGeometry, mic: int = 0) -> np.ndarray:
    """Total arriving energy per reflection order at one microphone."""
    order = room.max_image_order if room.max_image_order is not None else room.default_order()
    images, refl = image_sources(room, order)
    r = np.linalg.norm(images - array.positions[mic], axis=1)
    e = (room.reflection_coefficient() ** refl / (4.0 * np.pi * r)) ** 2
    return np.bincount(refl, weights=e, minlength=order + 1)


def schroeder_rt60(h: np.ndarray, sample_rate: int = DEFAULT_SAMPLE_RATE,
                   fit_range=(-5.0, -25.0)) -> float:
    """RT60 extrapolated from a line fit to the backward-integrated decay curve."""
    h = np.asarray(h, dtype=np.float64)
    edc = np.cumsum(h[::-1] ** 2)[::-1]
    edc_db = 10.0 * np.log10(np.maximum(edc / edc[0], 1e-300))
    hi, lo = fit_range
    sel = np.nonzero((edc_db <= hi) & (edc_db >= lo))[0]
    if len(sel) < 2:
        raise ValueError("decay curve does not span the fit range")
    t = sel / sample_rate
    slope, _ = np.polyfit(t, edc_db[sel], 1)
    return -60.0 / slope


def synthesize_mixture(s: AudioBuffer, rirs: RIRSet, peak: float | None = 0.9) -> AudioBuffer:
    """Convolve a mono source with each RIR; one joint gain sets the peak."""
    if s.sample_rate != rirs.sample_rate:
        raise ValueError(f"source at {s.sample_rate} Hz, RIRs at {rirs.sample_rate} Hz")
    if s.num_samples == 0:
        raise ValueError("empty source")
    src = s.samples[0]
    x = np.stack([fftconvolve(src, h) for h in rirs.responses])
    if peak is not None:
        m = np.max(np.abs(x))
        if m > 0:
            x *= peak / m
    return AudioBuffer(x, s.sample_rate)


def source_doa(array: ArrayGeometry, source_position) -> float:
    """Angle in degrees between the array axis and the direction to the source."""
    v = np.asarray(source_position, dtype=np.float64) - array.center
    cosang = np.dot(v / np.linalg.norm(v), array.axis)
    return float(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))


# --- dataset synthesis -------------------------------------------------------


@dataclass
class RoomSimConfig:
    room_min: float = 3.0
    room_max: float = 10.0
    distance_min: float = 0.5
    distance_max: float = 5.0
    rt60_min: float = 0.0
    rt60_max: float = 0.7
    wall_margin: float = 0.3
    peak: float = 0.9
    sample_rate: int = DEFAULT_SAMPLE_RATE
    spacings: tuple = DEFAULT_SPACINGS
    max_duration: float | None = None

    def __post_init__(self):
        if not RT60_RANGE[0] <= self.rt60_min <= self.rt60_max <= RT60_RANGE[1]:
            raise ValueError(f"rt60 range must lie within {RT60_RANGE}")
        if not 0 < self.distance_min <= self.distance_max:
            raise ValueError("invalid source distance range")
        if not 0 < self.room_min <= self.room_max:
            raise ValueError("invalid room size range")


@dataclass
class ManifestRecord:
    utt_id: str
    mixture: str
    rir: str
    doa: float
    rt60: float
    extra: dict = field(default_factory=dict, compare=False)


MANIFEST_HEADER = "# utt_id\tmixture\trir\tdoa_deg\trt60_s"


def write_manifest(path, records) -> None:
    lines = [MANIFEST_HEADER]
    for r in records:
        lines.append(f"{r.utt_id}\t{r.mixture}\t{r.rir}\t{r.doa:.6f}\t{r.rt60:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields")
        records.append(ManifestRecord(parts[0], parts[1], parts[2], float(parts[3]), float(parts[4])))
    return records


def resolve(manifest_path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def sample_scene(rng: np.random.Generator, config: RoomSimConfig) -> tuple[RoomSpec, ArrayGeometry]:
    """Draw a room, array placement and source position by rejection sampling."""
    base = default_array(spacings=config.spacings)
    half_aperture = np.abs(base.positions - base.center).max(axis=0)
    for _ in range(1000):
        dims = rng.uniform(config.room_min, config.room_max, size=3)
        lo = half_aperture + config.wall_margin
        if np.any(dims - 2 * lo <= 0):
            continue
        center = rng.uniform(lo, dims - lo)
        rt60 = float(rng.uniform(config.rt60_min, config.rt60_max))
        for _ in range(100):
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
            src = center + rng.uniform(config.distance_min, config.distance_max) * u
            if inside(dims, src, config.wall_margin):
                room = RoomSpec(tuple(dims), rt60, tuple(src), tuple(center))
                return room, base.translated(center)
    raise RuntimeError("could not place a source inside the sampled rooms")


def list_corpus(corpus_dir) -> list[Path]:
    files = sorted(Path(corpus_dir).glob("*.wav"))
    if not files:
        raise FileNotFoundError(f"no .wav files in {corpus_dir}")
    return files


def _make_item(args):
    index, files, out_dir, config, seed = args
    rng = np.random.default_rng([seed, index])
    src_path = files[int(rng.integers(len(files)))]
    s = read_audio(src_path, config.sample_rate)
    if s.channels != 1:
        s = AudioBuffer(s.samples[:1], s.sample_rate)
    if config.max_duration is not None:
        s = AudioBuffer(s.samples[:, : int(config.max_duration * s.sample_rate)], s.sample_rate)
    room, array = sample_scene(rng, config)
    rirs = simulate_rir(room, array, sample_rate=config.sample_rate)
    x = synthesize_mixture(s, rirs, peak=config.peak)
    # keep the source length so mixtures and clean speech stay aligned
    x = AudioBuffer(x.samples[:, : s.num_samples], x.sample_rate)

    utt_id = f"utt{index:05d}"
    mix_rel = f"mixtures/{utt_id}.wav"
    rir_rel = f"rirs/{utt_id}.wav"
    write_audio(out_dir / mix_rel, x, "FLOAT")
    write_audio(out_dir / rir_rel, AudioBuffer(rirs.responses, rirs.sample_rate), "FLOAT")
    doa = source_doa(array, room.source_position)
    info = {
        "source_file": src_path.name,
        "room": list(room.dimensions),
        "source_position": list(room.source_position),
        "array_center": list(array.center),
        "rt60": room.rt60_target,
        "doa_deg": doa,
        "image_order": room.default_order(),
    }
    (out_dir / "rirs" / f"{utt_id}.json").write_text(json.dumps(info, sort_keys=True, indent=1))
    return ManifestRecord(utt_id, mix_rel, rir_rel, doa, room.rt60_target, info)


def generate_dataset(corpus_dir, n_utterances: int, config: RoomSimConfig | None = None,
                     seed: int = 0, out_dir=None, workers: int = 1) -> list[ManifestRecord]:
    """Render ``n_utterances`` reverberant array mixtures and write ``manifest.tsv``.

    Item ``i`` draws all its randomness from ``default_rng([seed, i])`` so
    serial and parallel runs write identical files.
    """
    config = config or RoomSimConfig()
    files = list_corpus(corpus_dir)
    if n_utterances < 1:
        raise ValueError("n_utterances must be at least 1")
    out_dir = Path(out_dir)
    (out_dir / "mixtures").mkdir(parents=True, exist_ok=True)
    (out_dir / "rirs").mkdir(parents=True, exist_ok=True)
    jobs = [(i, files, out_dir, config, seed) for i in range(n_utterances)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_make_item, jobs))
    else:
        records = [_make_item(j) for j in jobs]
    write_manifest(out_dir / "manifest.tsv", records)
    (out_dir / "roomsim_config.json").write_text(
        json.dumps({**asdict(config), "seed": seed, "n_utterances": n_utterances}, sort_keys=True, indent=1)
    )
    return records
