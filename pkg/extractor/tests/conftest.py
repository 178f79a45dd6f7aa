def pytest_addoption(parser):
    parser.addoption(
        "--run-pretrained",
        action="store_true",
        default=False,
        help="run tests that need downloaded ImageNet weights",
    )
