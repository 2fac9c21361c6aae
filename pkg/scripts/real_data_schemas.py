"""Expected layouts for the user-supplied real datasets, and the commands that fit them.

No data ships with the repo. Drop a CSV with a header row next to this script
and run, for example::

    python3 scripts/real_data_schemas.py boston path/to/housing.csv

The file is checked against the schema (column names, row count, numeric
values) and the gen/fit/eval command lines are printed. Any other bivariate
CSV works the same way through ``jetcopula fit --columns a,b``.
"""

import argparse
import sys

from jetcopula.data import DataError, load_csv

SCHEMAS = {
    "boston": {
        "columns": ["lstat", "medv"],
        "rows": 506,
        "about": "Boston Housing (Kaggle): lower-status share of the population vs median home value",
    },
    "intc_msft": {
        "columns": ["INTC", "MSFT"],
        "rows": 1263,
        "about": "daily opening prices of Intel and Microsoft (Yahoo Finance), one row per trading day",
    },
    "goog_fb": {
        "columns": ["GOOG", "FB"],
        "rows": 1259,
        "about": "daily closing prices of Alphabet and Facebook, May 2015 to May 2020 (Yahoo Finance)",
    },
}


def describe() -> None:
    for name, s in SCHEMAS.items():
        print(f"{name}: columns {','.join(s['columns'])}; about {s['rows']} rows; {s['about']}")


def check(name: str, path: str) -> int:
    schema = SCHEMAS[name]
    try:
        ds = load_csv(path, columns=schema["columns"])
    except (OSError, DataError) as exc:
        print(f"{path}: {exc}", file=sys.stderr)
        return 1
    if len(ds) != schema["rows"]:
        print(f"note: {len(ds)} rows, the reference copy has {schema['rows']}")
    cols = ",".join(schema["columns"])
    print(f"jetcopula fit --data {path} --columns {cols} --out-dir runs/{name}/fit")
    print(f"jetcopula eval --model runs/{name}/fit/model.json --data {path} --columns {cols} --out-dir runs/{name}/eval")
    return 0


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("name", nargs="?", choices=sorted(SCHEMAS))
    p.add_argument("csv", nargs="?")
    args = p.parse_args(argv)
    if args.name is None or args.csv is None:
        describe()
        return 0
    return check(args.name, args.csv)


if __name__ == "__main__":
    sys.exit(main())
