"""Recompute the oracle-derived test fixtures in tests/fixtures/derived.json."""

from lsdeconv.oracles import main

if __name__ == "__main__":
    raise SystemExit(main(["regen-fixtures"]))
