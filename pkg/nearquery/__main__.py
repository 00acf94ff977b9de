import sys

from nearquery.main import main

sys.exit(main())
