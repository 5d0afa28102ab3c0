import sys

from ivpsr.main import cli_main

sys.exit(cli_main())
