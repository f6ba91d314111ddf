import sys

from vizecg.cli import main

sys.exit(main())
