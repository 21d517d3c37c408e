from .codebook import Codebook, ema_update, nearest
from .codes import (
    bits_to_codes,
    codes_to_bits,
    compose_code,
    compose_codes,
    decompose_code,
    decompose_codes,
    from_bits,
    to_bits,
)
from .layers import (
    EVAL,
    TRAIN,
    Bottleneck,
    BottleneckOutput,
    DVQBottleneck,
    GumbelBottleneck,
    SemhashBottleneck,
    dvq,
    gumbel_softmax,
    make_bottleneck,
    semhash,
)
from .usage import UsageReport, read_histogram_csv, usage_stats, write_histogram_csv
