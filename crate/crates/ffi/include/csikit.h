#ifndef CSIKIT_H
#define CSIKIT_H

/* Generated by cbindgen from the csikit-ffi sources. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum CsikitStatus {
  CSIKIT_STATUS_OK = 0,
  CSIKIT_STATUS_NULL_POINTER = 1,
  CSIKIT_STATUS_INVALID_ARGUMENT = 2,
  CSIKIT_STATUS_IO = 3,
  CSIKIT_STATUS_CORRUPT_DATA = 4,
  CSIKIT_STATUS_NON_FINITE = 5,
  CSIKIT_STATUS_BUFFER_TOO_SMALL = 6,
  CSIKIT_STATUS_PANIC = 7,
} CsikitStatus;

/*
 Architecture variant for `csikit_model_new`.
 */
typedef enum CsikitAblation {
  CSIKIT_ABLATION_BASELINE = 0,
  CSIKIT_ABLATION_NONE_CONV = 1,
  CSIKIT_ABLATION_CONFORMER_II = 2,
} CsikitAblation;

/*
 Quantizer selector for `csikit_model_attach_quantizer`.
 */
typedef enum CsikitQuantizer {
  CSIKIT_QUANTIZER_SVQ_VAE = 0,
  CSIKIT_QUANTIZER_UNIFORM = 1,
  CSIKIT_QUANTIZER_MU_LAW = 2,
  CSIKIT_QUANTIZER_BASE_VV = 3,
} CsikitQuantizer;

/*
 Opaque model handle.
 */
typedef struct CsikitModel CsikitModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Builds a freshly initialized model with the default architecture at
 compression ratio `cr`.

 # Safety
 `out` must be a valid pointer to writable storage for one handle.
 */
enum CsikitStatus csikit_model_new(uint32_t cr,
                                   enum CsikitAblation ablation,
                                   uint64_t seed,
                                   struct CsikitModel **out);

/*
 Loads a checkpoint file.

 # Safety
 `path` must be a NUL-terminated string and `out` writable.
 */
enum CsikitStatus csikit_model_load(const char *path, struct CsikitModel **out);

/*
 Writes the model to a checkpoint file.

 # Safety
 `model` must be a live handle and `path` a NUL-terminated string.
 */
enum CsikitStatus csikit_model_save(const struct CsikitModel *model, const char *path);

/*
 Releases a handle. Null is ignored.

 # Safety
 `model` must be null or a handle not yet freed.
 */
void csikit_model_free(struct CsikitModel *model);

/*
 Attaches a quantizer with `bits` bits per index (embedding length 32).

 # Safety
 `model` must be a live handle.
 */
enum CsikitStatus csikit_model_attach_quantizer(struct CsikitModel *model,
                                                enum CsikitQuantizer kind,
                                                uint8_t bits,
                                                uint64_t seed);

/*
 Number of input values: `rows * cols` of the real CSI matrix.

 # Safety
 `model` must be null or a live handle; null yields 0.
 */
uintptr_t csikit_model_input_len(const struct CsikitModel *model);

/*
 Codeword length; 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
uintptr_t csikit_model_codeword_len(const struct CsikitModel *model);

/*
 Total parameter count; 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
uintptr_t csikit_model_param_count(const struct CsikitModel *model);

/*
 Encode plus decode FLOPs of the handle's architecture; 0 for null.

 # Safety
 `model` must be null or a live handle.
 */
uint64_t csikit_model_flops(const struct CsikitModel *model);

/*
 Encodes one row-major real CSI matrix into a codeword.

 # Safety
 `input` must hold `input_len` values and `codeword` room for `codeword_len`.
 */
enum CsikitStatus csikit_encode(const struct CsikitModel *model,
                                const double *input,
                                uintptr_t input_len,
                                double *codeword,
                                uintptr_t codeword_len);

/*
 Decodes a codeword into a row-major real CSI matrix.

 # Safety
 `codeword` must hold `codeword_len` values and `output` room for `output_len`.
 */
enum CsikitStatus csikit_decode(const struct CsikitModel *model,
                                const double *codeword,
                                uintptr_t codeword_len,
                                double *output,
                                uintptr_t output_len);

/*
 Quantizes a codeword into a framed bitstream. `written` receives the
 stream length; when `capacity` is too small the call fails with
 `BUFFER_TOO_SMALL` and `written` holds the required size.

 # Safety
 `codeword` must hold `codeword_len` values, `out` room for `capacity`
 bytes (it may be null when `capacity` is 0), and `written` be writable.
 */
enum CsikitStatus csikit_quantize(const struct CsikitModel *model,
                                  const double *codeword,
                                  uintptr_t codeword_len,
                                  uint8_t *out,
                                  uintptr_t capacity,
                                  uintptr_t *written);

/*
 Parses a framed bitstream and writes the dequantized codeword.

 # Safety
 `stream` must hold `stream_len` bytes and `codeword` room for `codeword_len`.
 */
enum CsikitStatus csikit_dequantize(const struct CsikitModel *model,
                                    const uint8_t *stream,
                                    uintptr_t stream_len,
                                    double *codeword,
                                    uintptr_t codeword_len);

/*
 Full feedback path (encode, quantize if attached, decode) for one matrix.

 # Safety
 `input` and `output` must each hold `len` values.
 */
enum CsikitStatus csikit_reconstruct(const struct CsikitModel *model,
                                     const double *input,
                                     double *output,
                                     uintptr_t len);

/*
 FLOPs of the default architecture at compression ratio `cr`; 0 when `cr`
 is not a valid ratio.
 */
uint64_t csikit_flops(uint32_t cr);

/*
 Copies the calling thread's last error message into `buf` (always
 NUL-terminated when `capacity > 0`) and returns the full message length
 excluding the terminator. Returns 0 when no error has been recorded.

 # Safety
 `buf` must be null or point to `capacity` writable bytes.
 */
uintptr_t csikit_last_error(char *buf, uintptr_t capacity);

/*
 Static description of a status code.
 */
const char *csikit_status_str(enum CsikitStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CSIKIT_H */
