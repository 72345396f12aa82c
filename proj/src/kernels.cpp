#include "kernels.hpp"

#include "dfe/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <malloc.h>
#include <thread>
#include <vector>

namespace dfe {

namespace {

int default_budget() {
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

int g_thread_budget = default_budget();

} // namespace

void set_thread_budget(int threads) { g_thread_budget = threads < 1 ? default_budget() : threads; }

int thread_budget() { return g_thread_budget; }

void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& fn) {
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(g_thread_budget), count);
    if (workers <= 1) {
        if (count > 0) fn(0, count);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    const std::size_t chunk = (count + workers - 1) / workers;
    for (std::size_t w = 1; w < workers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(count, begin + chunk);
        if (begin < end) pool.emplace_back(fn, begin, end);
    }
    fn(0, std::min(count, chunk));
    for (auto& t : pool) t.join();
}

} // namespace dfe

namespace dfe::kernels {

namespace {

typedef double v8d __attribute__((vector_size(64)));

constexpr int kMr = 8;
constexpr int kNr = 24;
constexpr int kKc = 256;

inline v8d load8(const double* p) {
    v8d v;
    std::memcpy(&v, p, sizeof(v));
    return v;
}

inline void store8(double* p, v8d v) { std::memcpy(p, &v, sizeof(v)); }

// c (kMr x kNr, leading dim ldc) = c + ap * bp over kc steps; ap is packed
// k-major with kMr values per step, bp k-major with kNr values per step.
void micro_kernel(int kc, const double* ap, const double* bp, double* c, int ldc, bool zero_init) {
    v8d acc[kMr][3];
#pragma GCC unroll 8
    for (int r = 0; r < kMr; ++r) {
#pragma GCC unroll 3
        for (int q = 0; q < 3; ++q) acc[r][q] = zero_init ? v8d{} : load8(c + static_cast<std::size_t>(r) * ldc + 8 * q);
    }
    for (int p = 0; p < kc; ++p) {
        const v8d b0 = load8(bp), b1 = load8(bp + 8), b2 = load8(bp + 16);
#pragma GCC unroll 8
        for (int r = 0; r < kMr; ++r) {
            const double a = ap[r];
            acc[r][0] += b0 * a, acc[r][1] += b1 * a, acc[r][2] += b2 * a;
        }
        ap += kMr;
        bp += kNr;
    }
#pragma GCC unroll 8
    for (int r = 0; r < kMr; ++r) {
#pragma GCC unroll 3
        for (int q = 0; q < 3; ++q) store8(c + static_cast<std::size_t>(r) * ldc + 8 * q, acc[r][q]);
    }
}

} // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a, int lda, const double* b, int ldb,
          double* c, int ldc, bool accumulate) {
    if (m <= 0 || n <= 0) return;
    if (k <= 0) {
        if (!accumulate) {
            for (int i = 0; i < m; ++i) std::fill(c + static_cast<std::size_t>(i) * ldc, c + static_cast<std::size_t>(i) * ldc + n, 0.0);
        }
        return;
    }

    const int row_blocks = (m + kMr - 1) / kMr;
    const int k_blocks = (k + kKc - 1) / kKc;

    // Pack A: for each k-block, row-blocks of kMr rows stored k-major. Rows
    // past m are zero; their products are never stored.
    std::vector<double> ap(static_cast<std::size_t>(row_blocks) * kMr * k, 0.0);
    auto a_at = [&](int i, int p) { return trans_a ? a[static_cast<std::size_t>(p) * lda + i] : a[static_cast<std::size_t>(i) * lda + p]; };
    for (int kb = 0; kb < k_blocks; ++kb) {
        const int k0 = kb * kKc;
        const int kc = std::min(kKc, k - k0);
        double* block = ap.data() + static_cast<std::size_t>(k0) * row_blocks * kMr;
        for (int rb = 0; rb < row_blocks; ++rb) {
            double* dst = block + static_cast<std::size_t>(rb) * kMr * kc;
            for (int p = 0; p < kc; ++p) {
                for (int r = 0; r < kMr; ++r) {
                    const int i = rb * kMr + r;
                    dst[p * kMr + r] = i < m ? a_at(i, k0 + p) : 0.0;
                }
            }
        }
    }

    const int panels = (n + kNr - 1) / kNr;
    parallel_for(static_cast<std::size_t>(panels), [&](std::size_t begin, std::size_t end) {
        std::vector<double> bp(static_cast<std::size_t>(kKc) * kNr);
        double tile[kMr * kNr];
        for (std::size_t panel = begin; panel < end; ++panel) {
            const int j0 = static_cast<int>(panel) * kNr;
            const int nc = std::min(kNr, n - j0);
            for (int kb = 0; kb < k_blocks; ++kb) {
                const int k0 = kb * kKc;
                const int kc = std::min(kKc, k - k0);
                for (int p = 0; p < kc; ++p) {
                    double* dst = bp.data() + static_cast<std::size_t>(p) * kNr;
                    const int kk = k0 + p;
                    if (trans_b) {
                        for (int jj = 0; jj < nc; ++jj) dst[jj] = b[static_cast<std::size_t>(j0 + jj) * ldb + kk];
                    } else {
                        std::memcpy(dst, b + static_cast<std::size_t>(kk) * ldb + j0, sizeof(double) * nc);
                    }
                    for (int jj = nc; jj < kNr; ++jj) dst[jj] = 0.0;
                }
                const bool zero_init = kb == 0 && !accumulate;
                const double* ablock = ap.data() + static_cast<std::size_t>(k0) * row_blocks * kMr;
                for (int rb = 0; rb < row_blocks; ++rb) {
                    const int i0 = rb * kMr;
                    const int mr = std::min(kMr, m - i0);
                    const double* apanel = ablock + static_cast<std::size_t>(rb) * kMr * kc;
                    double* cp = c + static_cast<std::size_t>(i0) * ldc + j0;
                    if (mr == kMr && nc == kNr) {
                        micro_kernel(kc, apanel, bp.data(), cp, ldc, zero_init);
                    } else {
                        if (!zero_init) {
                            for (int r = 0; r < mr; ++r) std::memcpy(tile + r * kNr, cp + static_cast<std::size_t>(r) * ldc, sizeof(double) * nc);
                        }
                        micro_kernel(kc, apanel, bp.data(), tile, kNr, zero_init);
                        for (int r = 0; r < mr; ++r) std::memcpy(cp + static_cast<std::size_t>(r) * ldc, tile + r * kNr, sizeof(double) * nc);
                    }
                }
            }
        }
    });
}

void add_scalar(double* p, std::size_t n, double v) {
    for (std::size_t i = 0; i < n; ++i) p[i] = p[i] + v;
}

void affine(double* p, std::size_t n, double scale, double shift) {
    for (std::size_t i = 0; i < n; ++i) p[i] = std::fma(p[i], scale, shift);
}

void relu(double* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) p[i] = p[i] > 0.0 ? p[i] : 0.0;
}

void affine_relu(double* p, std::size_t n, double scale, double shift) {
    for (std::size_t i = 0; i < n; ++i) {
        const double v = std::fma(p[i], scale, shift);
        p[i] = v > 0.0 ? v : 0.0;
    }
}

void retain_large_allocations() {
#ifdef __GLIBC__
    static const bool once = [] {
        mallopt(M_MMAP_THRESHOLD, 256 << 20);
        mallopt(M_TRIM_THRESHOLD, 512 << 20);
        return true;
    }();
    (void)once;
#endif
}

void im2col(const PatchGeometry& g, const double* image, double* col, int ldc, int col_offset) {
    const int k = g.kernel;
    for (int ch = 0; ch < g.channels; ++ch) {
        const double* plane = image + static_cast<std::size_t>(ch) * g.in_h * g.in_w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* row = col + static_cast<std::size_t>((ch * k + ky) * k + kx) * ldc + col_offset;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky * g.dilation;
                    double* dst = row + static_cast<std::size_t>(oy) * g.out_w;
                    if (iy < 0 || iy >= g.in_h) {
                        std::fill(dst, dst + g.out_w, 0.0);
                        continue;
                    }
                    const double* src = plane + static_cast<std::size_t>(iy) * g.in_w;
                    const int x_off = kx * g.dilation - g.pad;
                    if (g.stride == 1 && x_off >= 0 && x_off + g.out_w <= g.in_w) {
                        std::memcpy(dst, src + x_off, sizeof(double) * g.out_w);
                        continue;
                    }
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride + x_off;
                        dst[ox] = (ix >= 0 && ix < g.in_w) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const PatchGeometry& g, const double* col, int ldc, int col_offset, double* image) {
    const int k = g.kernel;
    for (int ch = 0; ch < g.channels; ++ch) {
        double* plane = image + static_cast<std::size_t>(ch) * g.in_h * g.in_w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* row = col + static_cast<std::size_t>((ch * k + ky) * k + kx) * ldc + col_offset;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky * g.dilation;
                    if (iy < 0 || iy >= g.in_h) continue;
                    double* dst = plane + static_cast<std::size_t>(iy) * g.in_w;
                    const double* src = row + static_cast<std::size_t>(oy) * g.out_w;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kx * g.dilation;
                        if (ix >= 0 && ix < g.in_w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

} // namespace dfe::kernels
