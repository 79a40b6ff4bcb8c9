"""Synthetic PV-station data standing in for a real plant's hourly records."""
from __future__ import annotations

import numpy as np

from .dataset import NIGHT_HOURS, TimeSeriesFrame

FEATURES = (
    "power", "ghi", "dni", "dhi", "temperature", "module_temperature",
    "humidity", "wind_speed", "wind_direction", "pressure", "cloud_cover",
)
START = np.datetime64("2022-08-01T00:00:00")


def _ar1(rng: np.random.Generator, n: int, phi: float, sigma: float) -> np.ndarray:
    out = np.empty(n)
    out[0] = rng.normal(0.0, sigma / np.sqrt(1 - phi * phi))
    eps = rng.normal(0.0, sigma, n)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + eps[t]
    return out


def synth_pv(days: int, seed: int = 0, capacity: float = 590.0, minute: bool = False,
             start: np.datetime64 = START) -> TimeSeriesFrame:
    """Hourly (or per-minute) 11-feature frame.

    Power follows a clear-sky bell curve scaled by a seasonal amplitude and a
    cloud-transmission process with day-to-day persistence; the weather
    channels are noisy functions of the same latent state. Power is exactly 0
    during the night hours 21:00-03:00.
    """
    if days < 1:
        raise ValueError("days must be >= 1")
    rng = np.random.default_rng(seed)
    step = np.timedelta64(1, "m") if minute else np.timedelta64(1, "h")
    per_day = 1440 if minute else 24
    n = days * per_day
    ts = start + np.arange(n) * step
    hour = (ts - ts.astype("datetime64[D]")).astype("timedelta64[s]").astype(float) / 3600.0
    doy = (ts.astype("datetime64[D]") - ts.astype("datetime64[Y]")).astype(int)

    season = 0.75 + 0.25 * np.cos(2 * np.pi * (doy - 172) / 365.0)
    half_len = 5.5 + 2.0 * np.cos(2 * np.pi * (doy - 172) / 365.0)
    bell = np.clip(np.cos(np.pi * (hour - 12.0) / (2.0 * half_len)), 0.0, None)
    bell[np.abs(hour - 12.0) >= half_len] = 0.0

    daily = _ar1(rng, days, 0.6, 0.35)
    steps_per_hour = 60 if minute else 1
    hourly = _ar1(rng, days * 24, 0.8, 0.25)
    latent = np.repeat(daily, per_day) + np.repeat(hourly, steps_per_hour)
    transmission = 1.0 / (1.0 + np.exp(-(1.2 + 1.8 * latent)))

    clear_sky = 1000.0 * season * bell
    ghi = clear_sky * transmission
    dni = 900.0 * season * bell * transmission ** 2
    dhi = np.maximum(ghi - dni * bell, 0.0)
    temp_base = 8.0 + 15.0 * np.cos(2 * np.pi * (doy - 200) / 365.0)
    temperature = temp_base + 6.0 * bell * transmission + _ar1(rng, n, 0.95, 0.3 if not minute else 0.05)
    module_temp = temperature + 0.03 * ghi + rng.normal(0, 0.5, n)
    humidity = np.clip(70.0 - 25.0 * transmission * bell - 0.8 * (temperature - temp_base)
                       + rng.normal(0, 3.0, n), 5.0, 100.0)
    wind = np.abs(3.0 + 1.5 * _ar1(rng, n, 0.9, 0.3) + rng.normal(0, 0.3, n))
    wind_dir = (180.0 + 90.0 * np.sin(np.cumsum(rng.normal(0, 0.05, n)))) % 360.0
    pressure = 1013.0 + np.cumsum(rng.normal(0, 0.05, n)) * 0.5 - 2.0 * latent
    cloud = np.clip(100.0 * (1.0 - transmission) + rng.normal(0, 5.0, n), 0.0, 100.0)

    eff = 1.0 - 0.004 * np.maximum(module_temp - 25.0, 0.0)
    power = capacity * 0.85 * (ghi / 1000.0) * eff + rng.normal(0, 4.0, n) * (bell > 0)
    power = np.maximum(power, 0.0)
    hours_int = np.floor(hour).astype(int)
    power[np.isin(hours_int, list(NIGHT_HOURS)) | (bell == 0)] = 0.0

    values = np.stack([power, ghi, dni, dhi, temperature, module_temp, humidity, wind, wind_dir,
                       pressure, cloud], axis=1)
    return TimeSeriesFrame(ts.astype("datetime64[s]"), values, FEATURES, 0)
