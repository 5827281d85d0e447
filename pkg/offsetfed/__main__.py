from offsetfed import cli

cli.main()
