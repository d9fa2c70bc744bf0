#!/usr/bin/env python3
"""Turn a raw sensor table into the files `graphrecon` reads.

Input is a wide table with one timestamp column and one column per sensor,
either CSV or a pandas HDF5 store. Optional side files give sensor locations
(`sensor_id,latitude,longitude`) and pairwise road distances
(`from,to,distance`).

Outputs, all headerless unless noted:
  signal.csv   one row per sensor, one column per time step
  coords.csv   node_id,lat,lon (with header)
  edges.csv    src,dst,weight with 0-based indices (only with --distances)
  config.json  a starting run configuration
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd


def read_table(path, key, time_column):
    if path.suffix in (".h5", ".hdf5"):
        df = pd.read_hdf(path, key=key)
    else:
        df = pd.read_csv(path)
        col = time_column or df.columns[0]
        df = df.set_index(col)
    df.index = pd.to_datetime(df.index)
    df.columns = [str(c) for c in df.columns]
    return df.sort_index().apply(pd.to_numeric, errors="coerce")


def clean(df, freq, zero_is_missing, max_missing, start, end):
    if start or end:
        df = df.loc[start:end]
    if freq:
        df = df.resample(freq).mean()
    if zero_is_missing:
        df = df.replace(0.0, np.nan)
    missing = df.isna().mean()
    dropped = sorted(missing[missing > max_missing].index)
    df = df.drop(columns=dropped)
    # interior gaps by time, leading/trailing gaps by nearest value
    df = df.interpolate(method="time", limit_area="inside").ffill().bfill()
    df = df.dropna(axis=1, how="any")
    return df, dropped


def read_locations(path, sensors):
    loc = pd.read_csv(path)
    cols = {c.lower(): c for c in loc.columns}
    id_col = next((cols[c] for c in ("sensor_id", "station", "id", "node_id") if c in cols), loc.columns[0])
    lat_col = next(cols[c] for c in ("latitude", "lat") if c in cols)
    lon_col = next(cols[c] for c in ("longitude", "lon", "lng") if c in cols)
    loc[id_col] = loc[id_col].astype(str)
    loc = loc.drop_duplicates(id_col).set_index(id_col)
    absent = [s for s in sensors if s not in loc.index]
    return loc.reindex(sensors)[[lat_col, lon_col]], absent


def distance_edges(path, sensors, threshold):
    dist = pd.read_csv(path)
    dist.columns = ["from", "to", "distance"][: len(dist.columns)]
    dist["from"] = dist["from"].astype(str)
    dist["to"] = dist["to"].astype(str)
    index = {s: i for i, s in enumerate(sensors)}
    dist = dist[dist["from"].isin(index) & dist["to"].isin(index) & (dist["from"] != dist["to"])]
    dist = dist[np.isfinite(dist["distance"])]
    sigma = dist["distance"].std()
    w = np.exp(-((dist["distance"] / sigma) ** 2))
    edges = pd.DataFrame({"src": dist["from"].map(index), "dst": dist["to"].map(index), "weight": w})
    edges = edges[edges["weight"] >= threshold]
    # keep the larger weight of each unordered pair
    lo = edges[["src", "dst"]].min(axis=1)
    hi = edges[["src", "dst"]].max(axis=1)
    edges = edges.assign(src=lo, dst=hi).groupby(["src", "dst"], as_index=False)["weight"].max()
    return edges


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("table", type=Path, help="raw sensor table (.csv, .h5)")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--hdf-key", default="df")
    p.add_argument("--time-column")
    p.add_argument("--freq", help="resampling interval, e.g. 5min or 1h")
    p.add_argument("--start")
    p.add_argument("--end")
    p.add_argument("--zero-is-missing", action="store_true", help="treat exact zeros as dropouts")
    p.add_argument("--max-missing", type=float, default=0.1, help="drop sensors missing more than this fraction")
    p.add_argument("--locations", type=Path)
    p.add_argument("--distances", type=Path)
    p.add_argument("--edge-threshold", type=float, default=0.1)
    p.add_argument("--knn", type=int, default=8, help="k for the config's kNN graph when no distances are given")
    p.add_argument("--train-fraction", type=float, default=2 / 7)
    args = p.parse_args(argv)

    df, dropped = clean(
        read_table(args.table, args.hdf_key, args.time_column),
        args.freq,
        args.zero_is_missing,
        args.max_missing,
        args.start,
        args.end,
    )
    sensors = list(df.columns)

    coords = None
    if args.locations:
        coords, absent = read_locations(args.locations, sensors)
        if absent:
            print(f"dropping {len(absent)} sensors without a location", file=sys.stderr)
            sensors = [s for s in sensors if s not in absent]
            df = df[sensors]
            coords = coords.loc[sensors]
            dropped += absent

    if not sensors or df.empty:
        sys.exit("no usable sensors left after cleaning")

    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "signal.csv", df.to_numpy().T, delimiter=",", fmt="%.6g")
    (out / "sensors.txt").write_text("\n".join(sensors) + "\n")

    graph = None
    if coords is not None:
        coords.index.name = "node_id"
        coords.columns = ["lat", "lon"]
        coords.to_csv(out / "coords.csv")
        graph = {"kind": "knn", "coords": "coords.csv", "k": args.knn}
    if args.distances:
        edges = distance_edges(args.distances, sensors, args.edge_threshold)
        edges.to_csv(out / "edges.csv", header=False, index=False, float_format="%.6g")
        graph = {"kind": "edge-list", "path": "edges.csv"}
    if graph is None:
        sys.exit("need --locations or --distances to build a graph")

    n_steps = len(df)
    step = args.freq or (pd.infer_freq(df.index) if len(df) >= 3 else None)
    config = {
        "graph": graph,
        "signal": {"path": "signal.csv", "layout": "nodes-as-rows", "step_label": str(step or "")},
        "t_split": max(1, int(round(n_steps * args.train_fraction))),
        "output_dir": "run",
    }
    (out / "config.json").write_text(json.dumps(config, indent=2) + "\n")
    print(f"{len(sensors)} sensors x {n_steps} steps written to {out} ({len(dropped)} sensors dropped)")


if __name__ == "__main__":
    main()
