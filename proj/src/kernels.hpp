#pragma once

// Internal dense linear-algebra kernels shared by the layer code and the
// dense frame encoder. Every output element of gemm() is produced by the
// same micro-kernel as a sequential multiply-add chain over k = 0..K-1, so
// a value does not depend on matrix sizes, tiling or threading.

#include <cstddef>

namespace dfe::kernels {

/// C = op(A) * op(B) (+ C when accumulate). op(A) is M x K, op(B) is K x N,
/// all row-major with the given leading dimensions.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a, int lda, const double* b, int ldb,
          double* c, int ldc, bool accumulate);

// Element-wise epilogues. Both the per-crop layers and the dense encoder go
// through these so that their rounding is identical.
void add_scalar(double* p, std::size_t n, double v);
void affine(double* p, std::size_t n, double scale, double shift);
void relu(double* p, std::size_t n);
/// affine followed by relu in one pass; same rounding as the two calls.
void affine_relu(double* p, std::size_t n, double scale, double shift);

/// Keeps freed multi-megabyte activation buffers on the heap instead of
/// returning them to the OS after every batch (glibc only; no-op elsewhere).
void retain_large_allocations();

/// Geometry of a 2-D patch gather: output (oy, ox) reads input
/// (oy*stride - pad + ky*dilation, ox*stride - pad + kx*dilation).
struct PatchGeometry {
    int channels, in_h, in_w;
    int kernel, stride, pad, dilation;
    int out_h, out_w;
};

/// col[(c*k + ky)*k + kx][col_offset + oy*out_w + ox] = image[c][...] or 0
/// outside the image. col has leading dimension ldc.
void im2col(const PatchGeometry& g, const double* image, double* col, int ldc, int col_offset);

/// Adjoint of im2col: scatter-adds col back into image (image is not cleared).
void col2im(const PatchGeometry& g, const double* col, int ldc, int col_offset, double* image);

} // namespace dfe::kernels
