"""
writer.py - Every file a run produces goes through here

A ResultWriter owns one output directory. It writes:
- CSV tables (csv.DictWriter, floats formatted so reruns give identical bytes)
- JSON records
- binary field and subspace dumps (paths handed out by path_for)
- an events.csv log of everything that happened, one row per event

Events carry a step counter instead of a timestamp, so two runs with the same
config produce the same event log.
"""
import csv
import json
import os
import threading

EVENT_FIELDS = ['step', 'command', 'level', 'event', 'detail']


def format_value(value):
    """Floats in a fixed exponent format, everything else via str()."""
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, float):
        return f"{value:.12e}"
    if isinstance(value, complex):
        return f"{value.real:.12e}{value.imag:+.12e}j"
    return value


class ResultWriter:
    def __init__(self, out_dir, command="run", echo=True):
        """
        out_dir: where all outputs go (created if needed)
        command: the CLI command name, stamped on every event row
        echo: also print events to the terminal
        """
        self.out_dir = out_dir
        self.command = command
        self.echo = echo
        self.step = 0
        self._lock = threading.Lock()
        os.makedirs(out_dir, exist_ok=True)

        self.log_file = os.path.join(out_dir, "events.csv")
        if not os.path.exists(self.log_file):
            with open(self.log_file, 'w', newline='') as f:
                writer = csv.writer(f)
                writer.writerow(EVENT_FIELDS)

    def path_for(self, name):
        path = os.path.join(self.out_dir, name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        return path

    def event(self, event, detail="", level="info"):
        """Append one row to events.csv"""
        with self._lock:
            self.step += 1
            with open(self.log_file, 'a', newline='') as f:
                writer = csv.writer(f)
                writer.writerow([self.step, self.command, level, event, detail or ''])
        if self.echo:
            prefix = "" if level == "info" else f"{level.upper()}: "
            print(f"  {prefix}{event}" + (f" ({detail})" if detail else ""))

    def write_csv(self, name, rows, fieldnames=None):
        rows = list(rows)
        if fieldnames is None:
            fieldnames = list(rows[0].keys()) if rows else []
        path = self.path_for(name)
        with self._lock:
            with open(path, 'w', newline='') as f:
                writer = csv.DictWriter(f, fieldnames=fieldnames)
                writer.writeheader()
                for row in rows:
                    writer.writerow({k: format_value(row.get(k, '')) for k in fieldnames})
        self.event("wrote_csv", f"{name}: {len(rows)} rows")
        return path

    def write_json(self, name, record):
        path = self.path_for(name)
        with self._lock:
            with open(path, 'w') as f:
                json.dump(record, f, indent=2, sort_keys=True, default=_json_default)
                f.write("\n")
        self.event("wrote_json", name)
        return path

    def write_text(self, name, text):
        path = self.path_for(name)
        with self._lock:
            with open(path, 'w') as f:
                f.write(text)
        self.event("wrote_text", name)
        return path


def _json_default(value):
    """numpy scalars and arrays, complex numbers and tuples in JSON records"""
    if isinstance(value, complex):
        return {'real': value.real, 'imag': value.imag}
    if hasattr(value, 'tolist'):
        return value.tolist()
    raise TypeError(f"Cannot serialize {type(value).__name__}")
