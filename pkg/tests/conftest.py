from dataclasses import replace
import logging
import sys
import time
from types import SimpleNamespace

from dotenv import load_dotenv
import numpy as np
import pytest
import _pytest.terminal

from m2clip.encoders import EncoderConfig
from m2clip_harness.config import DataConfig, ExperimentConfig, TrainConfig
from m2clip_harness.log_style import Style, configure_logging, strip_ansi
from m2clip_harness.synthetic import build_splits
from m2clip_harness.trainer import build_model, build_vocabulary, train

# Load environment variables from .env file
load_dotenv()


# ------------- PYTEST HOOKS -------------
# These hooks implement a custom reporting system that:
# 1. Suppresses pytest's built-in markers (F, s, ., etc.)
# 2. Disables the built-in summary output
# 3. Prints one results table at the end of the session


@pytest.hookimpl(tryfirst=True)
def pytest_report_teststatus(report, config):
    """Return an empty shortletter so pytest prints no status marker"""
    return report.outcome, "", report.outcome


# Store collected tests for accurate reporting
collected_tests = {"items": [], "nodeids": []}

# Track session start time for accurate duration reporting
session_start_time = None


@pytest.hookimpl(trylast=True)
def pytest_sessionstart(session):
    global session_start_time
    session_start_time = time.time()

    terminal = session.config.pluginmanager.getplugin("terminalreporter")
    if terminal:

        def disabled_summary(*args, **kwargs):
            return None

        for attr_name in dir(terminal):
            if attr_name.startswith("summary_") and callable(getattr(terminal, attr_name)):
                setattr(terminal, attr_name, disabled_summary)


@pytest.hookimpl(trylast=True)
def pytest_collection_modifyitems(session, config, items):
    collected_tests["items"] = items
    collected_tests["nodeids"] = [item.nodeid for item in items]


def _restore_stdout():
    if hasattr(sys, "_original_stdout") and hasattr(sys, "_log_file"):
        sys.stdout = sys._original_stdout
        sys._log_file.close()
        delattr(sys, "_original_stdout")
        delattr(sys, "_log_file")


@pytest.hookimpl(hookwrapper=True)
def pytest_unconfigure(config):
    """Print our results table as the very last thing and block the default summary"""
    terminal = config.pluginmanager.getplugin("terminalreporter")
    if not terminal:
        yield
        _restore_stdout()
        return

    reports = {outcome: list(terminal.stats.get(outcome, [])) for outcome in ("failed", "passed", "skipped")}
    terminal.stats.clear()
    terminal.summary_stats = lambda: None
    terminal.summary_errors = lambda: None
    terminal.summary_failures = lambda: None
    terminal.summary_warnings = lambda: None

    yield

    failed_nodeids = {r.nodeid for r in reports["failed"] if r.when == "call"}
    skipped_nodeids = {r.nodeid for r in reports["skipped"]}
    passed_nodeids = {
        r.nodeid
        for r in reports["passed"]
        if r.when == "call" and r.nodeid not in failed_nodeids and r.nodeid not in skipped_nodeids
    }
    all_nodeids = {r.nodeid for reports_list in reports.values() for r in reports_list}
    total_tests = len(all_nodeids) or len(collected_tests["items"])
    duration = time.time() - session_start_time if session_start_time is not None else 0.0

    print("\n" + "=" * 80)
    if total_tests > 0:
        test_info = {}
        for outcome, reports_list in reports.items():
            for report in reports_list:
                if report.when == "call" or (report.when == "setup" and report.skipped):
                    info = test_info.setdefault(report.nodeid, {"status": "unknown", "duration": 0.0})
                    if outcome in ("failed", "passed") and report.when == "call":
                        info["status"] = outcome
                    elif outcome == "skipped":
                        info["status"] = "skipped"
                    info["duration"] = getattr(report, "duration", 0.0)

        status_width, duration_width, test_width = 8, 10, 60
        print(f"{Style.GRAY}TEST RESULTS{Style.RESET}")
        print(f"{Style.GRAY}{'─' * 80}{Style.RESET}")
        header = f"{'STATUS':<{status_width}} {'DURATION':<{duration_width}} {'TEST':<{test_width}}"
        print(f"{Style.BOLD}{header}{Style.RESET}")
        print(f"{Style.GRAY}{'─' * 80}{Style.RESET}")

        marks = {
            "passed": (Style.GREEN, "✓"),
            "failed": (Style.RED, "✗"),
            "skipped": (Style.YELLOW, "○"),
        }
        for nodeid, info in sorted(test_info.items()):
            test_name = nodeid.split("::")[-1]
            if len(test_name) > test_width:
                test_name = test_name[: test_width - 3] + "..."
            color, mark = marks.get(info["status"], (Style.GRAY, "?"))
            status = f"{color}{mark:<{status_width - 1}}{Style.RESET}"
            duration_str = f"{info['duration']:.2f}s"
            print(f"{status} {duration_str:<{duration_width}} {test_name}")
        print(f"{Style.GRAY}{'─' * 80}{Style.RESET}")

    print(
        f"{Style.GRAY}SUMMARY · {Style.RESET}{Style.BOLD}{duration:.2f}s{Style.RESET} · "
        f"{Style.GREEN}✓{Style.RESET} {len(passed_nodeids)} passed · "
        f"{Style.RED}✗{Style.RESET} {len(failed_nodeids)} failed · "
        f"{Style.YELLOW}○{Style.RESET} {len(skipped_nodeids)} skipped · "
        f"{Style.BLUE}{total_tests}{Style.RESET} total"
    )
    print("=" * 80)
    _restore_stdout()


@pytest.hookimpl(trylast=True)
def pytest_runtest_setup(item):
    """Add a clear separator before each test."""
    print(f"\n{Style.GRAY}{'─' * 80}{Style.RESET}")
    print(f"{Style.BOLD}{item.nodeid}{Style.RESET}\n")


def _print_step_summary(report):
    node = getattr(report, "node", None)
    if node is not None and "step_tracker" in getattr(node, "funcargs", {}):
        node.funcargs["step_tracker"].print_summary_report()


@pytest.hookimpl(trylast=True)
def pytest_runtest_logreport(report):
    """Display result at the end of each test with minimalist design principles."""
    if not (report.when == "call" or (report.when == "setup" and report.skipped)):
        return
    if report.passed:
        print(f"\n{Style.GREEN}✓ {Style.BOLD}PASSED{Style.RESET}")
        _print_step_summary(report)
    elif report.failed:
        print(f"\n{Style.RED}× {Style.BOLD}FAILED{Style.RESET}")
        _print_step_summary(report)
        if isinstance(report.longrepr, tuple) and len(report.longrepr) >= 3:
            lines = str(report.longrepr[2]).strip().split("\n")
            print(f"{Style.RED}Error details:{Style.RESET}")
            for line in lines[:10]:
                print(f"{Style.GRAY}  {line.strip()}{Style.RESET}")
            if len(lines) > 10:
                print(f"{Style.GRAY}  ... ({len(lines) - 10} more lines){Style.RESET}")
        elif isinstance(report.longrepr, str):
            print(f"{Style.RED}Error: {Style.GRAY}{report.longrepr}{Style.RESET}")
    elif report.skipped:
        reason = ""
        if isinstance(report.longrepr, tuple) and len(report.longrepr) >= 3:
            reason = report.longrepr[2]
        if "Skipped:" in reason:
            reason = reason.split("Skipped:")[1].strip().strip("'")
        print(f"\n{Style.YELLOW}○ {Style.BOLD}SKIPPED{Style.RESET} {Style.GRAY}{reason}{Style.RESET}")


def pytest_configure(config):
    """Configure logging for tests with minimalist design principles"""
    config.option.verbose = 0
    config.option.no_summary = True
    config.option.no_header = True

    # Completely disable pytest's logging system to prevent duplicates
    config.option.log_cli = False
    config.option.log_cli_level = None

    terminal = config.pluginmanager.getplugin("terminalreporter")
    if terminal:
        terminal.showfspath = False

        def custom_write_fspath_result(nodeid, res, **kwargs):
            pass

        terminal.write_fspath_result = custom_write_fspath_result.__get__(terminal)

    configure_logging("DEBUG", "test_output.log")
    logging.getLogger("pytest").setLevel(logging.ERROR)

    # Library chatter only above INFO; per-step lines stay in DEBUG runs
    logging.getLogger("m2clip").setLevel(logging.INFO)
    logging.getLogger("m2clip_harness").setLevel(logging.INFO)

    logging.getLogger("test").setLevel(logging.INFO)


# Force disable pytest's built-in summary with a more direct approach
_pytest.terminal.TerminalReporter.summary_stats = lambda self: None


@pytest.hookimpl(trylast=True)
def pytest_plugin_registered(plugin, manager):
    if isinstance(plugin, _pytest.terminal.TerminalReporter):
        plugin.summary_stats = lambda: None
        plugin.summary_failures = lambda: None
        plugin.summary_warnings = lambda: None
        plugin.summary_deselected = lambda: None


@pytest.fixture(scope="session", autouse=True)
def redirect_stdout_to_file():
    class Tee:
        def __init__(self, original_stdout, file):
            self.original_stdout = original_stdout
            self.file = file

        def write(self, message):
            self.original_stdout.write(message)
            self.file.write(strip_ansi(message))

        def flush(self):
            self.original_stdout.flush()
            self.file.flush()

    original_stdout = sys.stdout
    log_file = open("test_output.log", "a", encoding="utf-8")
    sys.stdout = Tee(original_stdout, log_file)
    yield
    # Restored in pytest_unconfigure after the summary is printed
    sys._original_stdout = original_stdout
    sys._log_file = log_file


# ------------- FIXTURES -------------

TINY_MODEL = EncoderConfig(
    video_layers=2,
    text_layers=2,
    video_width=16,
    text_width=16,
    joint_width=8,
    patch_size=8,
    video_heads=2,
    text_heads=2,
    max_text_len=12,
    num_frames=3,
    image_size=16,
)


def tiny_config(**train_overrides) -> ExperimentConfig:
    """Two-layer towers on 3-frame 16x16 clips over three training classes"""
    cfg = ExperimentConfig(
        seed=0,
        model=replace(TINY_MODEL),
        data=DataConfig(train_classes=3, holdout_classes=2, per_class=2, val_per_class=2, holdout_per_class=2),
        train=TrainConfig(epochs=1, batch_size=4, learning_rate=1e-2),
    )
    for key, value in train_overrides.items():
        setattr(cfg.train, key, value)
    return cfg.validate()


@pytest.fixture
def make_config():
    return tiny_config


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def vocab():
    return build_vocabulary()


@pytest.fixture
def tiny_model(tiny_cfg, vocab):
    return build_model(tiny_cfg, vocab)


@pytest.fixture(scope="session")
def tiny_splits():
    cfg = tiny_config()
    return build_splits(cfg.data, cfg.model, cfg.seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Default-config fixtures back the slow acceptance tests. Under xdist they share
# the "default_run" group so one worker trains the model once.


@pytest.fixture(scope="session")
def default_cfg():
    return ExperimentConfig().validate()


@pytest.fixture(scope="session")
def default_splits(default_cfg):
    return build_splits(default_cfg.data, default_cfg.model, default_cfg.seed)


@pytest.fixture(scope="session")
def default_run(default_cfg, default_splits, vocab):
    model = build_model(default_cfg, vocab)
    initial = {name: param.data.copy() for name, param in model.named_parameters()}
    model, report = train(model, default_splits, default_cfg)
    return SimpleNamespace(model=model, report=report, initial=initial)
