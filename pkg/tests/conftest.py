import torch
from hypothesis import settings

torch.set_num_threads(1)

settings.register_profile("obrg", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("obrg")

# one line per acceptance criterion, filled in by test_acceptance.py
CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
