# ruff: noqa: E402
from dotenv import load_dotenv

load_dotenv(dotenv_path=".env-example")
load_dotenv(dotenv_path=".env", override=True)

import sys

from kvbench.cli import main

if __name__ == "__main__":
    sys.exit(main())
