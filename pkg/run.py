#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Launcher del laboratorio ES/GD - Imposta UTF-8 prima di tutto

    python run.py <comando> [opzioni]   -> stessa interfaccia di main.py
    python run.py test                  -> esegue tutti i test_*.py e stampa il riepilogo
"""

import importlib
import os
import sys

# FORZA UTF-8 su Windows PRIMA di importare qualsiasi cosa
if sys.platform == 'win32':
    os.environ['PYTHONIOENCODING'] = 'utf-8'
    os.environ['PYTHONUTF8'] = '1'

    # Forza codepage console
    try:
        import ctypes
        ctypes.windll.kernel32.SetConsoleOutputCP(65001)
        ctypes.windll.kernel32.SetConsoleCP(65001)
    except Exception:
        pass

TEST_MODULES = (
    'test_platform',
    'test_landscape',
    'test_optimizer',
    'test_theory',
    'test_analysis',
    'test_scenario',
    'test_artifacts',
    'test_validation',
    'test_cli',
)


def run_tests() -> int:
    """Esegue il main() di ogni modulo di test; codice 1 se almeno uno fallisce"""
    failed = []
    for name in TEST_MODULES:
        module = importlib.import_module(name)
        if module.main() != 0:
            failed.append(name)

    print("\n" + "=" * 60)
    if failed:
        print(f"MODULI CON TEST FALLITI: {', '.join(failed)}")
    else:
        print(f"TUTTI I {len(TEST_MODULES)} MODULI DI TEST SUPERATI")
    print("=" * 60)
    return 1 if failed else 0


if __name__ == "__main__":
    if sys.argv[1:2] == ['test']:
        sys.exit(run_tests())
    from main import main
    sys.exit(main())
