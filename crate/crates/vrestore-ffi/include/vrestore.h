/* C interface for the vrestore two-stage video restoration library.
 *
 * Conventions:
 *  - Handles are opaque; create with the *_load functions, release with the
 *    matching *_free. Handles are immutable and safe to share across threads
 *    for concurrent restoration calls.
 *  - Fallible functions return VR_OK (0) on success. On failure, call
 *    vr_last_error() on the same thread for a message.
 *  - Frame buffers are float32, row-major, RGB interleaved, values in [0,1]:
 *    index = ((t * height + y) * width + x) * 3 + c.
 */

#ifndef VRESTORE_H
#define VRESTORE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes. */
#define VR_OK 0
#define VR_ERR_NULL_ARGUMENT 1
#define VR_ERR_INVALID_ARGUMENT 2
#define VR_ERR_IO 3
#define VR_ERR_MODEL 4
#define VR_ERR_INTERNAL 5

/* Self-ensemble (test-time augmentation) modes. */
#define VR_TTA_NONE 0   /* single forward pass */
#define VR_TTA_STAGE1 1 /* 8 dihedral transforms in stage one */
#define VR_TTA_STAGE2 2 /* 8 dihedral transforms in stage two */
#define VR_TTA_BOTH 3   /* both stages ensembled */

/* Opaque model handles. */
typedef struct VrStage1 VrStage1;
typedef struct VrStage2 VrStage2;

/* Copy the calling thread's last error message into buf (NUL-terminated,
 * truncated to len bytes). Returns the full message length in bytes,
 * excluding the terminator. buf may be NULL to query the length. */
size_t vr_last_error(char *buf, size_t len);

/* Load a Stage-I (multi-frame recurrent) checkpoint. */
int vr_stage1_load(const char *path, VrStage1 **out);
void vr_stage1_free(VrStage1 *handle);

/* Load a Stage-II (single-frame refiner) checkpoint. */
int vr_stage2_load(const char *path, VrStage2 **out);
void vr_stage2_free(VrStage2 *handle);

/* Restore a clip in memory. frames: n_frames*height*width*3 floats.
 * pqf_labels: optional n_frames bytes, nonzero marks a high-quality frame;
 * pass NULL when unknown. stage2 may be NULL to run Stage I only. out
 * receives the restored clip (same shape, clamped to [0,1]) and may alias
 * frames. Only scale-1 (quality enhancement) models are supported here. */
int vr_restore_clip(const VrStage1 *stage1, const VrStage2 *stage2,
                    const float *frames, size_t n_frames, size_t height,
                    size_t width, const uint8_t *pqf_labels, int tta,
                    float *out);

/* Restore a PNG frame sequence directory (frame_00001.png, ...) into
 * out_dir, which is created if needed. */
int vr_restore_dir(const VrStage1 *stage1, const VrStage2 *stage2,
                   const char *in_dir, const char *out_dir, int tta);

/* PSNR in dB between two equally sized frames (peak 1.0, capped at 100). */
int vr_psnr(const float *a, const float *b, size_t height, size_t width,
            double *out);

/* Library version, e.g. "0.1.0". */
const char *vr_version(void);

#ifdef __cplusplus
}
#endif

#endif /* VRESTORE_H */
