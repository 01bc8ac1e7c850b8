"""Synthetic generator fleets with the export schema and known anomaly labels."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from datetime import date, timedelta

import numpy as np

from .dataset import AnomalyClass
from .labeling import label_record
from .records import IngestError, TelemetryRecord, engineer_features


class InvalidConfig(IngestError):
    pass


CAPACITIES_KVA = (10.0, 15.0, 20.0, 30.0, 45.0, 60.0, 80.0, 100.0, 150.0, 200.0)
# full-load burn per kVA of rated capacity, litres/hour
LITRES_PER_KVA_HOUR = 0.22
# share of sites without grid power, whose generator runs most of the day
OFF_GRID_SHARE = 0.3
START_DATE = date(2017, 9, 1)


@dataclass(frozen=True)
class FleetConfig:
    clusters: int = 5
    sites_per_cluster: int = 20
    visits_per_site: int = 50
    anomaly_rates: dict = field(default_factory=lambda: {1: 0.03, 2: 0.05, 3: 0.06})
    shift_strength: float = 0.0
    seed: int = 0

    def __post_init__(self):
        rates = {int(k): float(v) for k, v in dict(self.anomaly_rates).items()}
        object.__setattr__(self, "anomaly_rates", rates)
        if min(self.clusters, self.sites_per_cluster, self.visits_per_site) < 1:
            raise InvalidConfig("clusters, sites_per_cluster and visits_per_site must be >= 1")
        if set(rates) - {1, 2, 3}:
            raise InvalidConfig(f"anomaly rates only exist for classes 1-3, got {sorted(rates)}")
        if any(v < 0 for v in rates.values()) or sum(rates.values()) >= 0.5:
            raise InvalidConfig("anomaly rates must be non-negative and sum to < 0.5")
        if self.shift_strength < 0:
            raise InvalidConfig("shift_strength must be >= 0")

    @property
    def n_records(self) -> int:
        return self.clusters * self.sites_per_cluster * self.visits_per_site

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anomaly_rates"] = {str(k): v for k, v in sorted(self.anomaly_rates.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FleetConfig":
        return cls(**d)


def cluster_name(k: int) -> str:
    return f"CLUSTER_{k + 1:02d}"


def generate_synthetic_fleet(config: FleetConfig = FleetConfig()) -> list[TelemetryRecord]:
    """Simulate refuelling visits for every site of every cluster.

    Anomalies are injected in exact proportion to ``config.anomaly_rates`` and
    each one is built so the labelling rules recover its class. Clusters get
    fixed random offsets on daily runtime, load, visit spacing and generator
    size; ``shift_strength`` scales those offsets, so 0 gives identically
    distributed clusters. The random stream does not depend on
    ``shift_strength``: changing it moves the same underlying draws.
    """
    cfg = config
    base = np.random.default_rng([cfg.seed, 0])
    shift_rng = np.random.default_rng([cfg.seed, 1])
    offsets = shift_rng.standard_normal((cfg.clusters, 4)) * cfg.shift_strength

    n = cfg.n_records
    n_sites = cfg.clusters * cfg.sites_per_cluster
    counts = {c: int(round(r * n)) for c, r in sorted(cfg.anomaly_rates.items())}
    classes = np.zeros(n, dtype=np.int64)
    pos = 0
    for c, k in counts.items():
        classes[pos:pos + k] = c
        pos += k
    classes = base.permutation(classes)

    # generator size and grid access are drawn per site slot and shared by all
    # clusters, so without shift every cluster holds the same mix of sites
    slot_cap = base.integers(0, len(CAPACITIES_KVA), size=cfg.sites_per_cluster)
    slot_off_grid = base.uniform(size=cfg.sites_per_cluster) < OFF_GRID_SHARE
    site_start = base.integers(0, 10, size=n_sites)
    site_meter = base.uniform(1000.0, 20000.0, size=n_sites)
    days_base = base.integers(2, 21, size=n)
    u_rpd = base.uniform(size=n)
    u_load = base.uniform(size=n)
    u_anom = base.uniform(size=n)
    u_fill = base.uniform(size=n)

    records: list[TelemetryRecord] = []
    i = 0
    for s in range(n_sites):
        k = s // cfg.sites_per_cluster
        z = offsets[k]
        slot = s % cfg.sites_per_cluster
        cap_idx = int(np.clip(slot_cap[slot] + int(round(2.0 * z[3])), 0, len(CAPACITIES_KVA) - 1))
        kva = CAPACITIES_KVA[cap_idx]
        hourly_full = LITRES_PER_KVA_HOUR * kva
        max_per_day = round(24.0 * float(hourly_full), 2)
        tank = round(4.0 * max_per_day, 1)
        level = tank
        meter = round(float(site_meter[s]), 1)
        prev_date = START_DATE + timedelta(days=int(site_start[s]))
        site = f"{cluster_name(k)}-S{slot:03d}"
        lo, hi = (20.0, 23.9) if slot_off_grid[slot] else (2.0, 16.0)
        for _ in range(cfg.visits_per_site):
            cls = int(classes[i])
            days = int(np.clip(round(days_base[i] * np.exp(0.3 * z[2])), 1, 45))
            rpd = float(np.clip((lo + (hi - lo) * u_rpd[i]) * np.exp(0.35 * z[0]), 0.5, 23.9))
            load = float(np.clip((0.3 + 0.67 * u_load[i]) * np.exp(0.25 * z[1]), 0.15, 0.97))
            if cls == AnomalyClass.ZERO_RUNTIME_CONSUMPTION:
                runtime = 0.0
                consumed = days * hourly_full * (0.05 + 0.95 * u_anom[i])
            elif cls == AnomalyClass.EXCESS_RUNTIME:
                runtime = (24.05 + 6.0 * u_anom[i]) * days
                consumed = load * hourly_full * runtime
            elif cls == AnomalyClass.OVER_CONSUMPTION:
                runtime = rpd * days
                consumed = max_per_day * (1.02 + 0.48 * u_anom[i]) * days
            else:
                runtime = rpd * days
                consumed = load * hourly_full * runtime
            runtime = round(float(runtime), 2)
            consumed = round(float(consumed), 1)
            found = round(max(level - consumed, 0.0), 1)
            added = round(float((tank - found) * (0.6 + 0.4 * u_fill[i])), 1)
            eff_date = prev_date + timedelta(days=days)
            rec = TelemetryRecord(
                site_name=site,
                cluster=cluster_name(k),
                effective_date_of_visit=eff_date,
                previous_date_of_visit=prev_date,
                number_of_days=float(days),
                generator_capacity_kva=kva,
                current_hour_meter=round(meter + runtime, 2),
                previous_hour_meter=meter,
                previous_fuel_qte=level,
                qte_fuel_found=found,
                qte_fuel_added=added,
                total_qte_left=round(found + added, 1),
                consumption_his=consumed,
                running_time=runtime,
                maximum_consumption_per_day=max_per_day,
            )
            if label_record(engineer_features(rec)) != cls:
                raise RuntimeError(f"generated record {i} does not carry class {cls}")
            records.append(rec)
            meter = rec.current_hour_meter
            level = rec.total_qte_left
            prev_date = eff_date
            i += 1
    return records
