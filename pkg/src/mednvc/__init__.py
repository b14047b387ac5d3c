"""MED-NVC: masked-autoencoder pretraining and image/lab-data cross-attention fusion."""
