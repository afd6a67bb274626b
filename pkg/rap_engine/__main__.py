import sys

from rap_engine.cli import main

sys.exit(main())
