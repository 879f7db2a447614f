#include <malloc.h>

#include "mrgseq/cli.hpp"

int main(int argc, char** argv) {
    // Training allocates and frees many mid-sized buffers per step; keep
    // them on the heap instead of round-tripping through mmap.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return mrgseq::cli::run(argc, argv);
}
