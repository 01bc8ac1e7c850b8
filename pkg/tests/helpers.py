"""Shared builders for test fixtures."""
from datetime import date, timedelta

import numpy as np

from fuelwatch.ingest import LabeledDataset, TelemetryRecord, engineer_features

START = date(2018, 1, 1)


def make_record(days=1, runtime=10.0, consumption=50.0, maximum=200.0, *, site="S1", cluster="C1", start=START, **extra):
    fields = dict(
        site_name=site,
        cluster=cluster,
        effective_date_of_visit=start + timedelta(days=int(days)),
        previous_date_of_visit=start,
        number_of_days=float(days),
        generator_capacity_kva=45.0,
        current_hour_meter=1000.0 + runtime,
        previous_hour_meter=1000.0,
        previous_fuel_qte=500.0,
        qte_fuel_found=400.0,
        qte_fuel_added=300.0,
        total_qte_left=700.0,
        consumption_his=float(consumption),
        running_time=float(runtime),
        maximum_consumption_per_day=maximum,
    )
    fields.update(extra)
    return TelemetryRecord(**fields)


def engineered(**kw):
    return engineer_features(make_record(**kw))


# (days, running hours, litres consumed, daily maximum) -> class, read off the
# rule flowchart by hand: zero-runtime consumption, then > 24 h/day, then
# over the daily maximum, else normal.
BOUNDARY_CASES = [
    ((1, 0.0, 10.0, 200.0), 1),      # consumption with zero runtime
    ((1, 0.0, 0.0, 200.0), 0),       # nothing consumed, nothing run
    ((1, 0.0, 300.0, 200.0), 1),     # rule 1 beats rule 3
    ((1, 24.0, 100.0, 200.0), 0),    # exactly 24 h/day is not excess
    ((1, 24.01, 100.0, 200.0), 2),   # just above 24 h/day
    ((1, 28.0, 220.0, 200.0), 2),    # rule 2 beats rule 3
    ((1, 20.0, 220.0, 200.0), 3),    # over the maximum
    ((1, 20.0, 200.0, 200.0), 0),    # exactly at the maximum
    ((1, 20.0, 200.01, 200.0), 3),   # just above the maximum
    ((1, 23.99, 199.99, 200.0), 0),  # just below both limits
    ((4, 100.0, 400.0, 200.0), 2),   # 25 h/day over a 4-day period
    ((4, 96.0, 804.0, 200.0), 3),    # 24 h/day and 201 L/day
]


def boundary_records():
    return [
        (engineered(days=d, runtime=r, consumption=c, maximum=m, site=f"B{i}"), expected)
        for i, ((d, r, c, m), expected) in enumerate(BOUNDARY_CASES)
    ]


def make_ds(X, y, clusters=None, split="train", names=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    names = names or tuple(f"f{i}" for i in range(X.shape[1]))
    if clusters is None:
        clusters = ["C1"] * len(X)
    return LabeledDataset(names, X, np.asarray(y), np.asarray(clusters, dtype=object), split=split)


def blobs(n_per_class, centers, scale=1.0, seed=0):
    rng = np.random.default_rng(seed)
    X, y = [], []
    for c, (n, mu) in enumerate(zip(n_per_class, centers)):
        X.append(rng.normal(size=(n, len(mu))) * scale + np.asarray(mu, dtype=float))
        y += [c] * n
    return np.vstack(X), np.array(y)
