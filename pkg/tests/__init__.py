# Required for coverage.py to work properly
