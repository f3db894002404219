import sys

from headflow.cli import main

sys.exit(main())
