#!/usr/bin/env python3
"""
Scrittura e lettura degli artefatti su disco (CSV per le serie, JSON per i riepiloghi)

Ogni file viene scritto su un nome temporaneo e poi rinominato in modo atomico.
I CSV iniziano con una riga di commento '#' con unita' e hash dello scenario.
"""

import csv
import io
import json
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from optimizer import TrajectoryRecord

VERBOSE = True

TRAJECTORY_UNITS = {
    'step': 'passi',
    'drift': 'theta^2',
    'mu_R': 'reward',
    'sigma_R': 'reward',
    'update_norm': 'theta',
}


def _log(message: str):
    if VERBOSE:
        print(f"[IO] {message}", file=sys.stderr)


class ArtifactError(ValueError):
    """Directory non scrivibile o file di artefatto malformato"""


def ensure_output_dir(directory: str) -> str:
    """Crea la directory di output e verifica che sia scrivibile"""
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as e:
        raise ArtifactError(f"Impossibile creare la directory di output {directory}: {e}")
    if not os.access(directory, os.W_OK):
        raise ArtifactError(f"Directory di output {directory} non scrivibile")
    return directory


def write_text_atomic(path: str, text: str):
    tmp = f"{path}.tmp"
    try:
        with open(tmp, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise ArtifactError(f"Errore nel salvare {path}: {e}")


def _to_json_value(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    raise TypeError(f"Tipo non serializzabile: {type(value).__name__}")


def dumps_json(payload: Dict) -> str:
    """JSON stabile (chiavi ordinate, indentazione 2), array numpy convertiti in liste"""
    return json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=True, default=_to_json_value)


def write_json(path: str, payload: Dict):
    write_text_atomic(path, dumps_json(payload) + "\n")
    _log(f"[OK] Salvato {path}")


def _format(value) -> str:
    if value is None:
        return ''
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def write_series_csv(path: str, columns: Dict[str, Sequence], scenario_hash: str,
                     units: Optional[Dict[str, str]] = None):
    """
    Serie per colonne: {nome: valori}, tutte della stessa lunghezza

    La prima riga e' '# units: nome=[unita'] ...; scenario=<hash>'.
    """
    names = list(columns)
    lengths = {len(columns[name]) for name in names}
    if len(lengths) > 1:
        raise ArtifactError(f"Colonne di lunghezza diversa: {sorted(lengths)}")
    units = units or {}
    header = ' '.join(f"{name}=[{units.get(name, '-')}]" for name in names)

    buf = io.StringIO()
    buf.write(f"# units: {header}; scenario={scenario_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(names)
    for i in range(lengths.pop() if lengths else 0):
        writer.writerow([_format(columns[name][i]) for name in names])
    write_text_atomic(path, buf.getvalue())


def trajectory_columns(record: TrajectoryRecord) -> Dict[str, Sequence]:
    columns = {
        'step': np.arange(record.drift.shape[0]),
        'drift': record.drift,
        'mu_R': record.mu_R,
        'sigma_R': record.sigma_R,
        'update_norm': record.update_norm,
    }
    for k, values in record.projections.items():
        columns[f"proj_{k}"] = values
    for name, values in record.group_drift.items():
        columns[f"group:{name}"] = values
    return columns


def write_trajectory_csv(path: str, record: TrajectoryRecord, scenario_hash: str):
    columns = trajectory_columns(record)
    units = dict(TRAJECTORY_UNITS)
    units.update({name: 'theta' for name in columns if name.startswith('proj_')})
    units.update({name: 'theta^2' for name in columns if name.startswith('group:')})
    write_series_csv(path, columns, scenario_hash, units)


def read_series_csv(path: str) -> Dict[str, np.ndarray]:
    """Legge un CSV scritto da write_series_csv (righe '#' ignorate, celle vuote = nan)"""
    try:
        with open(path, 'r', encoding='utf-8', newline='') as f:
            rows = [row for row in csv.reader(line for line in f if not line.startswith('#'))]
    except FileNotFoundError:
        raise ArtifactError(f"File {path} non trovato")
    if not rows:
        raise ArtifactError(f"File {path} vuoto")
    names, data = rows[0], rows[1:]
    columns: Dict[str, List[float]] = {name: [] for name in names}
    for line, row in enumerate(data, 2):
        if len(row) != len(names):
            raise ArtifactError(f"{path}: riga {line} con {len(row)} colonne, attese {len(names)}")
        try:
            for name, cell in zip(names, row):
                columns[name].append(float(cell) if cell else float('nan'))
        except ValueError:
            raise ArtifactError(f"{path}: valore non numerico alla riga {line}")
    return {name: np.asarray(values) for name, values in columns.items()}


def read_scenario_hash(path: str) -> Optional[str]:
    with open(path, 'r', encoding='utf-8') as f:
        first = f.readline()
    if first.startswith('#') and 'scenario=' in first:
        return first.rsplit('scenario=', 1)[1].strip()
    return None


def write_vector(path: str, theta, scenario_hash: str):
    """Vettore di parametri come CSV a una colonna"""
    write_series_csv(path, {'theta': np.asarray(theta, dtype=float)}, scenario_hash, {'theta': 'theta'})


def read_vector(path: str) -> np.ndarray:
    columns = read_series_csv(path)
    if 'theta' not in columns:
        raise ArtifactError(f"{path}: colonna 'theta' mancante")
    return columns['theta']
