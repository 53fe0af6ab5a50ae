import json
from decimal import Decimal, ROUND_HALF_EVEN
from typing import Any

import yaml
from dotenv import load_dotenv, find_dotenv

US_PER_S = 1_000_000
NJ_PER_J = 1_000_000_000


# === ENV HANDLING ===
def load_env():
    _ = load_dotenv(find_dotenv(usecwd=True))


# === UNIT CONVERSION ===
def _scaled_int(value, exponent: int) -> int:
    return int(Decimal(str(value)).scaleb(exponent).to_integral_value(rounding=ROUND_HALF_EVEN))


def seconds_to_us(seconds) -> int:
    """Seconds (int, float, str or Decimal) to integer microseconds, rounded half-even."""
    return _scaled_int(seconds, 6)


def watts_to_mw(watts) -> int:
    return _scaled_int(watts, 3)


def format_seconds(us: int) -> str:
    """Exact decimal rendering of a microsecond count, e.g. 1500 -> '0.001500'."""
    sign = "-" if us < 0 else ""
    q, r = divmod(abs(us), US_PER_S)
    return f"{sign}{q}.{r:06d}"


def format_joules(nj: int) -> str:
    """Exact decimal rendering of a nanojoule count, e.g. 45_000_000 -> '0.045000000'."""
    sign = "-" if nj < 0 else ""
    q, r = divmod(abs(nj), NJ_PER_J)
    return f"{sign}{q}.{r:09d}"


# === READERS ===
def read_yaml(file_path):
    with open(file_path, 'r', encoding='utf-8') as f:
        return yaml.safe_load(f) or {}


# === JSON WRITER ===
def write_to_json(data: Any, filename: str):
    with open(filename, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
