#! /usr/bin/env python3
# Copyright (c) oatsu
import sys

from voxelpy.cli import main

if __name__ == '__main__':
    sys.exit(main())
