#!/usr/bin/env python3
"""reflect-pipe launcher: python reflect_pipe.py <command> --config data/reflect_pipe.yaml"""

import asyncio
import sys

from pipeline_cli import main

if __name__ == "__main__":
    sys.exit(asyncio.run(main()))
