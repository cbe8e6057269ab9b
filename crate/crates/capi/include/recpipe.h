/* C ABI for the recpipe core library.
 *
 * Conventions:
 *  - handles (RpTemplates, RpIndex) are opaque; create/free in pairs;
 *  - fallible functions return an RpStatus and write results through
 *    out-parameters;
 *  - returned strings are NUL-terminated, owned by the caller, and freed
 *    with rp_string_free;
 *  - rp_last_error_message() describes the most recent failure on the
 *    calling thread (borrowed pointer; do not free).
 */

#ifndef RECPIPE_H
#define RECPIPE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes for every fallible call. */
typedef enum RpStatus {
  RP_STATUS_OK = 0,
  RP_STATUS_NULL_ARGUMENT = 1,
  RP_STATUS_INVALID_UTF8 = 2,
  RP_STATUS_INVALID_ARGUMENT = 3,
  RP_STATUS_PARSE_FAILURE = 4,
  RP_STATUS_IO = 5,
  RP_STATUS_NOT_FOUND = 6,
  RP_STATUS_INTERNAL = 7,
} RpStatus;

/* Field-set selector for rp_render_history. */
typedef enum RpFieldSet {
  RP_FIELD_SET_PRETRAIN = 0,
  RP_FIELD_SET_RATING = 1,
  RP_FIELD_SET_SEQREC = 2,
} RpFieldSet;

/* Opaque handle around a loaded template set. */
typedef struct RpTemplates RpTemplates;

/* Opaque handle around an immutable item index. */
typedef struct RpIndex RpIndex;

/* Library version as a static string; do not free. */
const char *rp_version(void);

/* Most recent error message on this thread, or NULL. Valid until the next
 * failing call on the same thread; do not free. */
const char *rp_last_error_message(void);

/* Frees a string returned through an out-parameter. */
void rp_string_free(char *ptr);

/* The built-in twelve-domain template set. Free with rp_templates_free. */
RpTemplates *rp_templates_builtin(void);

/* Loads a template set from a JSON config file. NULL on failure. */
RpTemplates *rp_templates_load(const char *path);

void rp_templates_free(RpTemplates *templates);

/* Renders a history (canonical JSON form) with a domain template. On
 * success writes a caller-owned string to out_text. */
RpStatus rp_render_history(const RpTemplates *templates,
                           const char *domain,
                           const char *history_json,
                           RpFieldSet field_set,
                           char **out_text);

/* Builds an index over an item catalog (items.jsonl), rendering each
 * item's match-text with the given domain template. NULL on failure. */
RpIndex *rp_index_build(const char *catalog_path,
                        const RpTemplates *templates,
                        const char *domain);

/* Loads an index previously written by rp_index_save. NULL on failure. */
RpIndex *rp_index_load(const char *path);

RpStatus rp_index_save(const RpIndex *index, const char *path);

/* Number of items in the index; 0 for a NULL handle. */
size_t rp_index_len(const RpIndex *index);

void rp_index_free(RpIndex *index);

/* Exact top-m match by dot product. Writes a JSON array
 * [{"item_id": "...", "score": 0.97}, ...] to out_json. */
RpStatus rp_index_match(const RpIndex *index,
                        const char *query,
                        size_t m,
                        char **out_json);

/* Embeds text into a caller-provided buffer of len floats; len must equal
 * the embedder dimension (1024). */
RpStatus rp_embed(const char *text, float *out, size_t len);

/* Root mean square error over parallel arrays. */
RpStatus rp_rmse(const double *predictions,
                 const double *truths,
                 size_t len,
                 double *out);

/* Mean absolute error over parallel arrays. */
RpStatus rp_mae(const double *predictions,
                const double *truths,
                size_t len,
                double *out);

/* HR@k for one query given the truth's 1-based rank (0 = not ranked). */
double rp_hit_rate_at_k(size_t truth_rank, size_t k);

/* Single-relevant-item NDCG@k given the truth's 1-based rank (0 = not
 * ranked). */
double rp_ndcg_at_k(size_t truth_rank, size_t k);

/* Parses a predicted rating out of a generation; RP_STATUS_PARSE_FAILURE
 * when no value can be extracted. */
RpStatus rp_parse_rating(const char *text, double scale, double *out);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* RECPIPE_H */
