#!/usr/bin/env python
"""heapctl: simulate, fit and inspect heaped count panels."""

import sys

from core.heap_cli import main

if __name__ == '__main__':
    sys.exit(main())
