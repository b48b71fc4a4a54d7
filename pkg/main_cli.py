from cli.router import cli_router

if __name__ == "__main__":
    cli_router(prog_name="pksim")
