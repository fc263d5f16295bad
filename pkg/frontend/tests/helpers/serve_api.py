"""Launch the dashboard's backing API against a throwaway run root.

Usage: python3 serve_api.py <port> <run_root>
"""

import sys
from pathlib import Path

import uvicorn

from spurfinder.api import build_app
from spurfinder.settings import Settings


def main() -> None:
    port = int(sys.argv[1])
    run_root = Path(sys.argv[2])
    settings = Settings(target_failures=8, max_samples=128, batch_size=32)
    app = build_app(settings, run_root=run_root)
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")


if __name__ == "__main__":
    main()
