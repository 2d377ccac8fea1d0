"""Parameter containers for the vehicle, wheel encoders and Lighthouse stations.

Every container converts to and from a flat numpy vector so the solvers can
treat the full parameter set as one decision block. Vector layouts:

    ModelParams       [D_f, D_r, C_f, C_r, B_f, B_r, m, I_z, l_f, l_r,
                       C_d0, C_d1, C_d2, C_m1, C_m2]
    WheelEncoderParams [r, b_car]
    LighthouseParams  [phi1, phi2, phi3, p_bs(3), p_body(4x2 row-major), dt1, dt2]
    ParamSet          [model(15), encoder(2), station_0(16), station_1(16), ...]
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

MODEL_PARAM_NAMES = (
    "D_f", "D_r", "C_f", "C_r", "B_f", "B_r",
    "m", "I_z", "l_f", "l_r",
    "C_d0", "C_d1", "C_d2",
    "C_m1", "C_m2",
)
ENCODER_PARAM_NAMES = ("r", "b_car")
N_MODEL = len(MODEL_PARAM_NAMES)
N_ENCODER = len(ENCODER_PARAM_NAMES)
N_STATION = 16
N_SENSORS = 4


@dataclass(frozen=True)
class ModelParams:
    D_f: float
    D_r: float
    C_f: float
    C_r: float
    B_f: float
    B_r: float
    m: float
    I_z: float
    l_f: float
    l_r: float
    C_d0: float
    C_d1: float
    C_d2: float
    C_m1: float
    C_m2: float

    def __post_init__(self):
        for name in ("m", "I_z", "l_f", "l_r", "D_f", "D_r", "C_f", "C_r", "B_f", "B_r"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("C_d0", "C_d1", "C_d2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in MODEL_PARAM_NAMES], dtype=float)

    @classmethod
    def from_vector(cls, v) -> "ModelParams":
        v = np.asarray(v, dtype=float)
        return cls(**{n: float(v[i]) for i, n in enumerate(MODEL_PARAM_NAMES)})


@dataclass(frozen=True)
class DriveConfig:
    """Settings of the vehicle model that are not identified.

    ``gamma`` is the share of motor force on the rear axle, ``eps`` the
    longitudinal speed below which slip angles use the cubic fit.
    """

    gamma: float = 0.5
    eps: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


@dataclass(frozen=True)
class WheelEncoderParams:
    r: float
    b_car: float

    def __post_init__(self):
        if not (self.r > 0 and self.b_car > 0):
            raise ValueError("wheel radius and car width must be positive")

    def to_vector(self) -> np.ndarray:
        return np.array([self.r, self.b_car], dtype=float)

    @classmethod
    def from_vector(cls, v) -> "WheelEncoderParams":
        return cls(float(v[0]), float(v[1]))


@dataclass(frozen=True)
class LighthouseParams:
    """Pose of one base station plus the receiver layout on the car."""

    angles: tuple[float, float, float]
    position: tuple[float, float, float]
    sensors_body: tuple[tuple[float, float], ...]
    tilt_offsets: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if len(self.sensors_body) != N_SENSORS:
            raise ValueError(f"expected {N_SENSORS} sensor positions")
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("lighthouse parameters must be finite")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([
            np.asarray(self.angles, dtype=float),
            np.asarray(self.position, dtype=float),
            np.asarray(self.sensors_body, dtype=float).ravel(),
            np.asarray(self.tilt_offsets, dtype=float),
        ])

    @classmethod
    def from_vector(cls, v) -> "LighthouseParams":
        v = np.asarray(v, dtype=float)
        return cls(
            angles=tuple(float(a) for a in v[0:3]),
            position=tuple(float(a) for a in v[3:6]),
            sensors_body=tuple((float(v[6 + 2 * k]), float(v[7 + 2 * k])) for k in range(N_SENSORS)),
            tilt_offsets=(float(v[14]), float(v[15])),
        )

    def with_pose(self, angles, position) -> "LighthouseParams":
        return replace(self, angles=tuple(float(a) for a in angles),
                       position=tuple(float(p) for p in position))


@dataclass(frozen=True)
class ParamSet:
    model: ModelParams
    encoder: WheelEncoderParams
    stations: tuple[LighthouseParams, ...] = field(default_factory=tuple)

    @property
    def n_bs(self) -> int:
        return len(self.stations)

    @property
    def size(self) -> int:
        return N_MODEL + N_ENCODER + N_STATION * self.n_bs

    def to_vector(self) -> np.ndarray:
        parts = [self.model.to_vector(), self.encoder.to_vector()]
        parts += [s.to_vector() for s in self.stations]
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, v, n_bs: int) -> "ParamSet":
        v = np.asarray(v, dtype=float)
        if v.size != N_MODEL + N_ENCODER + N_STATION * n_bs:
            raise ValueError("parameter vector has the wrong length")
        model = ModelParams.from_vector(v[:N_MODEL])
        enc = WheelEncoderParams.from_vector(v[N_MODEL:N_MODEL + N_ENCODER])
        off = N_MODEL + N_ENCODER
        stations = tuple(LighthouseParams.from_vector(v[off + N_STATION * i: off + N_STATION * (i + 1)])
                         for i in range(n_bs))
        return cls(model, enc, stations)

    def names(self) -> list[str]:
        out = list(MODEL_PARAM_NAMES) + list(ENCODER_PARAM_NAMES)
        for i in range(self.n_bs):
            out += [f"bs{i}.{n}" for n in station_param_names()]
        return out

    def index(self, name: str) -> int:
        return self.names().index(name)

    def replace_model(self, **changes) -> "ParamSet":
        return replace(self, model=replace(self.model, **changes))

    def to_dict(self) -> dict:
        return {
            "model": {n: getattr(self.model, n) for n in MODEL_PARAM_NAMES},
            "encoder": {"r": self.encoder.r, "b_car": self.encoder.b_car},
            "stations": [
                {
                    "angles": list(s.angles),
                    "position": list(s.position),
                    "sensors_body": [list(p) for p in s.sensors_body],
                    "tilt_offsets": list(s.tilt_offsets),
                }
                for s in self.stations
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSet":
        stations = tuple(
            LighthouseParams(
                angles=tuple(s["angles"]),
                position=tuple(s["position"]),
                sensors_body=tuple(tuple(p) for p in s["sensors_body"]),
                tilt_offsets=tuple(s.get("tilt_offsets", (0.0, 0.0))),
            )
            for s in d.get("stations", [])
        )
        return cls(ModelParams(**d["model"]), WheelEncoderParams(**d["encoder"]), stations)


def station_param_names() -> list[str]:
    names = ["phi1", "phi2", "phi3", "p_bs_x", "p_bs_y", "p_bs_z"]
    for k in range(1, N_SENSORS + 1):
        names += [f"s{k}_x", f"s{k}_y"]
    return names + ["dt1", "dt2"]


def model_field_names() -> tuple[str, ...]:
    return tuple(f.name for f in fields(ModelParams))


# Reference car used throughout the simulations: a ~1:28 scale AWD car.
DEFAULT_MODEL = ModelParams(
    D_f=0.65, D_r=0.75, C_f=1.3, C_r=1.4, B_f=3.0, B_r=3.5,
    m=0.2, I_z=4.5e-4, l_f=0.05, l_r=0.055,
    C_d0=0.02, C_d1=0.05, C_d2=0.02,
    C_m1=0.9, C_m2=0.15,
)
DEFAULT_ENCODER = WheelEncoderParams(r=0.0175, b_car=0.08)
DEFAULT_SENSORS_BODY = ((0.015, 0.0075), (0.015, -0.0075), (-0.015, 0.0075), (-0.015, -0.0075))
# Station above the track, optical (x) axis tilted 30 deg off vertical towards +y.
DEFAULT_STATION = LighthouseParams(
    angles=(0.0, np.pi / 3, np.pi / 2),
    position=(0.0, -1.2, 2.0),
    sensors_body=DEFAULT_SENSORS_BODY,
    tilt_offsets=(0.0021, -0.0013),
)


def default_params(n_bs: int = 1) -> ParamSet:
    stations = [DEFAULT_STATION]
    for i in range(1, n_bs):
        stations.append(DEFAULT_STATION.with_pose(
            (0.0, np.pi / 3, np.pi / 2 + np.pi * i), (0.0, -1.2 + 2.4 * i, 2.0)))
    return ParamSet(DEFAULT_MODEL, DEFAULT_ENCODER, tuple(stations[:n_bs]))


@dataclass(frozen=True)
class NoiseLevels:
    """Standard deviations of the additive noise.

    ``process_std`` is a density per sqrt(second) for the six states, so the
    per-step standard deviation at step ``dt`` is ``process_std * sqrt(dt)``.
    """

    process_std: tuple[float, ...] = (0.005, 0.005, 0.01, 0.1, 0.1, 0.5)
    imu_std: tuple[float, float, float] = (0.1, 0.1, 0.01)
    we_std: float = 1.0
    lh_std: float = 3e-4

    def process_step_std(self, dt: float) -> np.ndarray:
        return np.asarray(self.process_std, dtype=float) * np.sqrt(dt)

    def measurement_std(self, n_bs: int) -> np.ndarray:
        return np.concatenate([
            np.asarray(self.imu_std, dtype=float),
            np.full(4, self.we_std),
            np.full(8 * n_bs, self.lh_std),
        ])

    def scaled(self, factor: float) -> "NoiseLevels":
        return NoiseLevels(tuple(factor * s for s in self.process_std),
                           tuple(factor * s for s in self.imu_std),
                           factor * self.we_std, factor * self.lh_std)
